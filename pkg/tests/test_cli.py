"""End-to-end tests for the steer command line: exit codes, artifacts and manifests."""

import csv
import json

import pytest

from src.cli import BREAKDOWN, EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, load_config, main
from src.config import CONFIG_DIR, REFERENCE_CONFIG
from src.core_model import GainSchedule, TimeGrid
from src.errors import ConfigError, DimensionError
from src.results import MANIFEST_KEYS, write_gains_csv

pytestmark = [pytest.mark.cli, pytest.mark.integration]

SCALAR_CONFIG = """
[problem]
A = [[0.0]]
B = [[1.0]]
Sigma0 = [[1.0]]
SigmaT = [[1.0]]
T = 1.0
{extra}

[numeric]
N = 20
tol = 1e-6
{numeric}

[output]
formats = ["csv", "json", "md"]
"""


def write_config(tmp_path, extra="", numeric=""):
    path = tmp_path / "scalar.toml"
    path.write_text(SCALAR_CONFIG.format(extra=extra, numeric=numeric), encoding="utf-8")
    return path


def read_rows(path):
    with open(path, encoding="utf-8", newline="") as fp:
        return list(csv.reader(fp))


def read_json(path):
    return json.loads(path.read_text(encoding="utf-8"))


# --- Configuration ---


def test_reference_config_loads():
    cfg = load_config(REFERENCE_CONFIG)
    assert (cfg.problem.n, cfg.problem.m) == (2, 1)
    assert cfg.state_names == ("x", "v")
    assert cfg.numeric.N == 100 and cfg.numeric.seed == 42
    assert len(cfg.sha256) == 64


def test_unknown_key_is_rejected(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_config(tmp_path, extra="mass = 3.0"))


def test_mismatched_dimensions_are_rejected():
    with pytest.raises(DimensionError):
        load_config(CONFIG_DIR / "bad_dims.toml")


def test_invalid_toml_is_a_config_error(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("[problem\nA = 1", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(path)


# --- Subcommands ---


def test_steer_sdp_writes_tables_and_manifest(tmp_path):
    out = tmp_path / "sdp"
    code = main(["steer-sdp", "--config", str(write_config(tmp_path)), "--out", str(out)])
    assert code == EXIT_OK

    gains = read_rows(out / "gains.csv")
    assert gains[0] == ["t", "k1"]
    assert len(gains) == 21
    cov = read_rows(out / "covariance.csv")
    assert cov[0] == ["t", "sigma11"]
    assert len(cov) == 22

    manifest = read_json(out / "manifest.json")
    assert tuple(manifest) == MANIFEST_KEYS
    assert manifest["status"] == "converged"
    assert manifest["method"] == "steer-sdp"
    assert (manifest["n"], manifest["m"], manifest["N"]) == (1, 1, 20)
    assert manifest["residuals"]["dynamics_max"] <= 1e-5
    assert (out / "sdp_solution.json").exists()
    assert (out / "report.md").exists()


def test_steer_riccati_writes_riccati_table(tmp_path):
    out = tmp_path / "riccati"
    code = main(["steer-riccati", "--config", str(CONFIG_DIR / "scalar_bridge.toml"), "--out", str(out), "--steps", "100"])
    assert code == EXIT_OK
    rows = read_rows(out / "riccati.csv")
    assert rows[0] == ["t", "pi11", "h11", "c", "chat"]
    assert len(rows) == 102
    manifest = read_json(out / "manifest.json")
    assert manifest["residuals"]["boundary"] <= 1e-6
    assert manifest["objective"] > 0.0


def test_validate_writes_report(tmp_path):
    out = tmp_path / "validate"
    code = main(["validate", "--config", str(REFERENCE_CONFIG), "--out", str(out)])
    assert code == EXIT_OK
    assert read_json(out / "manifest.json")["status"] == "passed"
    assert (out / "validation.json").exists()


def test_bad_dimensions_exit_one_without_files(tmp_path, capsys):
    out = tmp_path / "bad"
    code = main(["validate", "--config", str(CONFIG_DIR / "bad_dims.toml"), "--out", str(out)])
    assert code == EXIT_ERROR
    assert not out.exists()
    assert "❌" in capsys.readouterr().err


def test_ill_posed_problem_lists_failed_checks(tmp_path, capsys):
    config = write_config(tmp_path).read_text(encoding="utf-8").replace("SigmaT = [[1.0]]", "SigmaT = [[0.0]]")
    path = tmp_path / "singular.toml"
    path.write_text(config, encoding="utf-8")
    code = main(["validate", "--config", str(path), "--out", str(tmp_path / "out")])
    assert code == EXIT_ERROR
    assert "[FAIL] spd_sigmaT" in capsys.readouterr().err


def test_iteration_cap_exits_two_with_manifest(tmp_path):
    out = tmp_path / "capped"
    config = write_config(tmp_path, numeric="max_iters = 3")
    code = main(["steer-sdp", "--config", str(config), "--out", str(out), "--tol", "1e-12"])
    assert code == EXIT_NOT_CONVERGED
    manifest = read_json(out / "manifest.json")
    assert manifest["status"] == "iteration-cap"
    assert manifest["iterations"] == 3
    assert not (out / "gains.csv").exists()


def test_simulate_writes_one_row_per_path_and_time(tmp_path):
    grid = TimeGrid.uniform(1.0, 100)
    gains_path = write_gains_csv(tmp_path / "gains.csv", GainSchedule.zeros(grid, 1, 2))
    out = tmp_path / "sim"
    code = main(
        [
            "simulate",
            "--config",
            str(REFERENCE_CONFIG),
            "--gains",
            str(gains_path),
            "--paths",
            "100",
            "--seed",
            "7",
            "--out",
            str(out),
        ]
    )
    assert code == EXIT_OK
    rows = read_rows(out / "paths.csv")
    assert rows[0] == ["path_id", "t", "x", "v", "u"]
    assert len(rows) == 1 + 100 * 101
    assert {r[0] for r in rows[1:]} == {str(i) for i in range(100)}

    stats = read_json(out / "ensemble_stats.json")
    assert stats["seed"] == 7 and stats["count"] == 100
    assert read_json(out / "manifest.json")["status"] == "completed"


def test_simulate_is_reproducible(tmp_path):
    gains_path = write_gains_csv(tmp_path / "gains.csv", GainSchedule.zeros(TimeGrid.uniform(1.0, 10), 1, 2))
    texts = []
    for name in ("a", "b"):
        out = tmp_path / name
        argv = ["simulate", "--config", str(REFERENCE_CONFIG), "--gains", str(gains_path), "--paths", "20"]
        assert main([*argv, "--out", str(out)]) == EXIT_OK
        texts.append((out / "paths.csv").read_bytes())
    assert texts[0] == texts[1]


def test_simulate_requires_gains(tmp_path):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", str(REFERENCE_CONFIG), "--out", str(out)]) == EXIT_ERROR
    assert not out.exists()


BRIDGE_PDE_CONFIG = """
[problem]
A = [[0.0]]
B = [[1.0]]
Sigma0 = [[2.0]]
SigmaT = [[0.25]]
T = 1.0

[numeric]
N = 100
tol = 1e-8
max_iters = 2000

[pde]
bounds = [[-8.0, 8.0]]
nodes = [80]
killing = {killing}
save_every = 25

[output]
formats = ["csv", "json", "md"]
"""


def write_pde_config(tmp_path, killing='"none"'):
    path = tmp_path / "bridge.toml"
    path.write_text(BRIDGE_PDE_CONFIG.format(killing=killing), encoding="utf-8")
    return path


def test_steer_pde_writes_field_table(tmp_path):
    out = tmp_path / "pde"
    assert main(["steer-pde", "--config", str(write_pde_config(tmp_path)), "--out", str(out)]) == EXIT_OK
    rows = read_rows(out / "pde_fields.csv")
    assert rows[0] == ["t", "x1", "phi", "phihat", "rho", "rho_controlled", "u"]
    assert len(rows) == 1 + 5 * 80
    history = read_json(out / "fortet_history.json")["residuals"]
    assert history[-1] <= 1e-8
    assert read_json(out / "manifest.json")["residuals"]["fortet"] <= 1e-8


def test_positivity_floor_breach_exits_with_manifest(tmp_path, capsys):
    # exp(-1e4 t) underflows below the floor within the first backward sweep
    out = tmp_path / "pde"
    config = write_pde_config(tmp_path, killing="10000.0")
    assert main(["steer-pde", "--config", str(config), "--out", str(out)]) == EXIT_NOT_CONVERGED
    manifest = read_json(out / "manifest.json")
    assert list(manifest) == list(MANIFEST_KEYS)
    assert manifest["status"] == BREAKDOWN
    assert manifest["residuals"]["failed_index"] >= 0
    assert "PositivityError" in (out / "report.md").read_text(encoding="utf-8")
    assert not (out / "pde_fields.csv").exists()
    assert "positivity floor" in capsys.readouterr().err


def test_steer_pde_needs_mesh_section(tmp_path):
    assert main(["steer-pde", "--config", str(write_config(tmp_path)), "--out", str(tmp_path / "o")]) == EXIT_ERROR


def test_nonpositive_steps_rejected(tmp_path):
    out = tmp_path / "o"
    assert main(["steer-sdp", "--config", str(write_config(tmp_path)), "--steps", "0", "--out", str(out)]) == EXIT_ERROR
    assert not out.exists()


def test_steer_subcommand_must_match_configured_method(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["steer-riccati", "--config", str(REFERENCE_CONFIG), "--out", str(out)]) == EXIT_ERROR
    assert not out.exists()
    assert "'sdp'" in capsys.readouterr().err


@pytest.mark.slow
def test_reference_sdp_run_shapes(tmp_path):
    out = tmp_path / "reference"
    assert main(["steer-sdp", "--config", str(REFERENCE_CONFIG), "--out", str(out)]) == EXIT_OK
    gains = read_rows(out / "gains.csv")
    assert gains[0] == ["t", "k1", "k2"]
    assert len(gains) == 101
    cov = read_rows(out / "covariance.csv")
    assert cov[0] == ["t", "sigma11", "sigma12", "sigma22"]
    assert len(cov) == 102
