"""
Command-line orchestration: read a TOML run configuration, dispatch to a solver and write
CSV/JSON artifacts plus the run manifest.

Exit codes: 0 converged (or passed), 2 solver did not converge (manifest still written),
1 configuration or structural error (nothing written).
"""

import argparse
import logging
import sys
import time

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from jsonschema import Draft202012Validator

from src import results
from src.config import FORTET_MAX_ITERS, LOG_LEVEL, RESULTS_DIR, RICCATI_MAX_ITERS
from src.core_model import (
    SteeringProblem,
    TimeGrid,
    check_dimensions,
    cost_functional,
    validate_problem,
)
from src.errors import (
    ConfigError,
    DimensionError,
    InvalidProblemError,
    RiccatiConvergenceError,
    RiccatiEscapeError,
    SteeringError,
)

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("steer-sdp", "steer-riccati", "steer-pde", "simulate", "validate")
METHODS = ("riccati", "sdp", "pde", "simulate")
# [method].name a steer subcommand must agree with; validate and simulate accept any
STEER_METHODS = {"steer-sdp": "sdp", "steer-riccati": "riccati", "steer-pde": "pde"}
FORMATS = ("csv", "json", "md")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2

BREAKDOWN = "breakdown"

_matrix = {
    "type": "array",
    "minItems": 1,
    "items": {"type": "array", "minItems": 1, "items": {"type": "number"}},
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["problem"],
    "properties": {
        "problem": {
            "type": "object",
            "additionalProperties": False,
            "required": ["A", "B", "Sigma0", "SigmaT", "T"],
            "properties": {
                "A": _matrix,
                "B": _matrix,
                "S": _matrix,
                "Sigma0": _matrix,
                "SigmaT": _matrix,
                "T": {"type": "number", "exclusiveMinimum": 0},
                "state_names": {"type": "array", "items": {"type": "string"}},
                "control_names": {"type": "array", "items": {"type": "string"}},
            },
        },
        "method": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"name": {"enum": list(METHODS)}},
        },
        "numeric": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "N": {"type": "integer", "minimum": 1},
                "tol": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "max_iters": {"type": "integer", "minimum": 1},
                "rho": {"type": "number", "exclusiveMinimum": 0},
                "over_relaxation": {"type": "number", "minimum": 1, "exclusiveMaximum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "paths": {"type": "integer", "minimum": 1},
                "substeps": {"type": "integer", "minimum": 1},
            },
        },
        "pde": {
            "type": "object",
            "additionalProperties": False,
            "required": ["bounds", "nodes"],
            "properties": {
                "bounds": {
                    "type": "array",
                    "minItems": 1,
                    "maxItems": 2,
                    "items": {"type": "array", "minItems": 2, "maxItems": 2, "items": {"type": "number"}},
                },
                "nodes": {
                    "type": "array",
                    "minItems": 1,
                    "maxItems": 2,
                    "items": {"type": "integer", "minimum": 3},
                },
                "killing": {"oneOf": [{"enum": ["quadratic", "none"]}, {"type": "number", "minimum": 0}]},
                "scheme": {"enum": ["upwind", "fitted"]},
                "save_every": {"type": "integer", "minimum": 1},
            },
        },
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "formats": {
                    "type": "array",
                    "uniqueItems": True,
                    "items": {"enum": list(FORMATS)},
                },
            },
        },
    },
}


@dataclass(frozen=True)
class NumericConfig:
    N: int = 100
    tol: float = 1e-6
    max_iters: int | None = None
    rho: float = 1.0
    over_relaxation: float = 1.6
    seed: int = 0
    paths: int = 1000
    substeps: int = 1


@dataclass(frozen=True)
class PdeConfig:
    bounds: tuple
    nodes: tuple
    killing: str | float = "quadratic"
    scheme: str = "upwind"
    save_every: int = 1


@dataclass(frozen=True)
class RunConfig:
    problem: SteeringProblem
    method: str | None
    numeric: NumericConfig
    pde: PdeConfig | None
    out_dir: Path
    formats: tuple
    state_names: tuple
    control_names: tuple
    sha256: str
    source: Path = field(default=Path("."))


def _matrix_from(name: str, rows) -> np.ndarray:
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DimensionError(f"{name} is not rectangular")
    return np.array(rows, dtype=float)


def load_config(path: Path) -> RunConfig:
    """Parse and strictly validate a run configuration; dimensions are cross-checked."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc

    errors = sorted(Draft202012Validator(CONFIG_SCHEMA).iter_errors(raw), key=lambda e: list(e.path))
    if errors:
        detail = "; ".join(f"{'/'.join(map(str, e.path)) or '<root>'}: {e.message}" for e in errors)
        raise ConfigError(f"{path}: {detail}")

    prob = raw["problem"]
    A = _matrix_from("A", prob["A"])
    S = _matrix_from("S", prob["S"]) if "S" in prob else np.zeros_like(A)
    problem = SteeringProblem(
        A=A,
        B=_matrix_from("B", prob["B"]),
        S=S,
        Sigma0=_matrix_from("Sigma0", prob["Sigma0"]),
        SigmaT=_matrix_from("SigmaT", prob["SigmaT"]),
        T=float(prob["T"]),
    )
    check_dimensions(problem)
    n, m = problem.n, problem.m

    state_names = tuple(prob.get("state_names", [f"x{i + 1}" for i in range(n)]))
    control_names = tuple(prob.get("control_names", ["u"] if m == 1 else [f"u{i + 1}" for i in range(m)]))
    if len(state_names) != n or len(control_names) != m:
        raise DimensionError("state_names/control_names do not match the problem dimensions")

    numeric = NumericConfig(**raw.get("numeric", {}))
    pde = None
    if "pde" in raw:
        section = raw["pde"]
        if len(section["bounds"]) != n or len(section["nodes"]) != n:
            raise DimensionError(f"pde bounds and nodes need {n} entries")
        pde = PdeConfig(
            bounds=tuple(tuple(b) for b in section["bounds"]),
            nodes=tuple(section["nodes"]),
            killing=section.get("killing", "quadratic"),
            scheme=section.get("scheme", "upwind"),
            save_every=section.get("save_every", 1),
        )

    output = raw.get("output", {})
    out_dir = Path(output["dir"]) if "dir" in output else RESULTS_DIR / path.stem
    return RunConfig(
        problem=problem,
        method=raw.get("method", {}).get("name"),
        numeric=numeric,
        pde=pde,
        out_dir=out_dir,
        formats=tuple(output.get("formats", ["csv", "json"])),
        state_names=state_names,
        control_names=control_names,
        sha256=results.sha256_of(path),
        source=path,
    )


# --- Subcommands ---


@dataclass
class Outcome:
    status: str
    exit_code: int
    iterations: int = 0
    residuals: dict = field(default_factory=dict)
    objective: float | None = None
    artifacts: list = field(default_factory=list)
    notes: list = field(default_factory=list)


def _run_validate(cfg: RunConfig, args) -> Outcome:
    grid = TimeGrid.uniform(cfg.problem.T, cfg.numeric.N)
    report = validate_problem(cfg.problem, grid)
    if not report.passed:
        raise InvalidProblemError(report)
    path = results.write_json(cfg.out_dir / "validation.json", report.as_dict())
    return Outcome("passed", EXIT_OK, artifacts=[path])


def _run_sdp(cfg: RunConfig, args) -> Outcome:
    from src.sdp_steering import SolverOptions, discretize, dynamics_residuals, lmi_margins, solve

    num = cfg.numeric
    prog = discretize(cfg.problem, num.N)
    opts = SolverOptions(
        max_iters=num.max_iters or SolverOptions.max_iters,
        eps_primal=num.tol,
        eps_dual=num.tol,
        rho=num.rho,
        over_relaxation=num.over_relaxation,
    )
    sol = solve(prog, opts)
    stats = sol.stats
    residuals = {"primal": stats.primal_residual, "dual": stats.dual_residual}
    if not stats.converged:
        return Outcome(stats.status, EXIT_NOT_CONVERGED, stats.iterations, residuals, stats.objective_value)

    residuals["dynamics_max"] = float(dynamics_residuals(prog, sol.Sigma, sol.U).max())
    residuals["lmi_margin_min"] = float(lmi_margins(sol.Y, sol.U, sol.Sigma).min())
    out = Outcome(stats.status, EXIT_OK, stats.iterations, residuals, stats.objective_value)
    if "csv" in cfg.formats:
        out.artifacts.append(results.write_gains_csv(cfg.out_dir / "gains.csv", sol.gains()))
        out.artifacts.append(results.write_covariance_csv(cfg.out_dir / "covariance.csv", sol.covariance_path()))
    if "json" in cfg.formats:
        summary = {"status": stats.status, "rho": stats.rho, "Y": sol.Y, "U": sol.U}
        out.artifacts.append(results.write_json(cfg.out_dir / "sdp_solution.json", summary))
    return out


def _run_riccati(cfg: RunConfig, args) -> Outcome:
    from src.riccati import riccati_covariance, riccati_gains, solve_coupled, sum_dynamics_residual

    num = cfg.numeric
    grid = TimeGrid.uniform(cfg.problem.T, num.N)
    try:
        sol = solve_coupled(cfg.problem, grid, tol=num.tol, max_iters=num.max_iters or RICCATI_MAX_ITERS)
    except RiccatiConvergenceError as exc:
        return Outcome("not-converged", EXIT_NOT_CONVERGED, exc.iterations, {"boundary": exc.residual})
    except RiccatiEscapeError as exc:
        return Outcome("escaped", EXIT_NOT_CONVERGED, 0, {"escape_time": exc.time})

    residuals = {"boundary": sol.residual}
    if grid.N >= 4:
        residuals["sum_dynamics"] = sum_dynamics_residual(sol, cfg.problem)
    gains = riccati_gains(sol, cfg.problem)
    cov = riccati_covariance(sol)
    out = Outcome("converged", EXIT_OK, sol.iterations, residuals, cost_functional(cfg.problem, gains, cov))
    out.notes.append(f"shooting start: {sol.start}")
    if "csv" in cfg.formats:
        out.artifacts.append(results.write_gains_csv(cfg.out_dir / "gains.csv", gains))
        out.artifacts.append(results.write_covariance_csv(cfg.out_dir / "covariance.csv", cov))
        out.artifacts.append(results.write_riccati_csv(cfg.out_dir / "riccati.csv", sol, cfg.problem.n))
    return out


def _run_pde(cfg: RunConfig, args) -> Outcome:
    from src.schrodinger_pde import (
        GridModel,
        Mesh,
        bridge_density,
        evolve_controlled,
        extract_control,
        fortet_iterate,
        gaussian_density,
    )

    if cfg.pde is None:
        raise ConfigError("steer-pde needs a [pde] section with bounds and nodes")
    num = cfg.numeric
    mesh = Mesh.uniform(cfg.pde.bounds, cfg.pde.nodes)
    grid = TimeGrid.uniform(cfg.problem.T, num.N)
    gm = GridModel.from_linear(cfg.problem, mesh, grid, killing=cfg.pde.killing, scheme=cfg.pde.scheme)
    rho0 = gaussian_density(mesh, cfg.problem.Sigma0)
    rhoT = gaussian_density(mesh, cfg.problem.SigmaT)
    factors = fortet_iterate(gm, rho0, rhoT, tol=num.tol, max_iters=num.max_iters or FORTET_MAX_ITERS)
    residuals = {"fortet": factors.residual, "monotone": factors.monotone}
    if not factors.converged:
        return Outcome(factors.status, EXIT_NOT_CONVERGED, factors.iterations, residuals)

    u = extract_control(factors, gm)
    controlled = evolve_controlled(gm, rho0, u)
    terminal_l1 = float(np.abs(controlled.terminal - rhoT.values).sum() * mesh.cell_volume)
    residuals["terminal_l1"] = terminal_l1
    out = Outcome("converged", EXIT_OK, factors.iterations, residuals)
    if "csv" in cfg.formats:
        times = range(0, grid.N + 1, cfg.pde.save_every)
        if grid.N not in times:
            times = [*times, grid.N]
        columns = {
            "phi": factors.phi.values,
            "phihat": factors.phihat.values,
            "rho": bridge_density(factors).values,
            "rho_controlled": controlled.values,
        }
        columns.update({name: u[..., j] for j, name in enumerate(cfg.control_names)})
        out.artifacts.append(results.write_field_csv(cfg.out_dir / "pde_fields.csv", mesh, grid, columns, times))
    if "json" in cfg.formats:
        out.artifacts.append(results.write_json(cfg.out_dir / "fortet_history.json", {"residuals": list(factors.history)}))
    return out


def _run_simulate(cfg: RunConfig, args) -> Outcome:
    from src.simulate import ensemble_stats, sample_paths

    if not args.gains:
        raise ConfigError("simulate needs --gains <csv> (for example the gains.csv of a steer run)")
    gains = results.read_gains_csv(Path(args.gains), cfg.problem.T, cfg.problem.n)
    num = cfg.numeric
    ens = sample_paths(cfg.problem, gains, num.paths, num.seed, substeps=num.substeps)
    stats = ensemble_stats(ens, gains, cfg.problem)
    target = cfg.problem.SigmaT
    cov_error = float(np.linalg.norm(stats.covariance[-1] - target) / np.linalg.norm(target)) if len(ens) > 1 else None
    residuals = {"terminal_covariance_rel": cov_error, "cost_stderr": stats.cost_stderr}
    out = Outcome("completed", EXIT_OK, 0, residuals, stats.cost_mean)
    if "csv" in cfg.formats:
        out.artifacts.append(
            results.write_paths_csv(cfg.out_dir / "paths.csv", ens, list(cfg.state_names), list(cfg.control_names))
        )
    if "json" in cfg.formats:
        payload = {
            "seed": stats.seed,
            "count": stats.count,
            "cost_mean": stats.cost_mean,
            "cost_stderr": stats.cost_stderr,
            "terminal_mean": stats.mean[-1],
            "terminal_covariance": stats.covariance[-1],
        }
        out.artifacts.append(results.write_json(cfg.out_dir / "ensemble_stats.json", payload))
    return out


def _breakdown(exc: ArithmeticError) -> Outcome:
    """Solver breakdown after a valid configuration: exit 2 with whatever the error pins down."""
    residuals = {}
    for attr, key in (("index", "failed_index"), ("eigenvalue", "min_eigenvalue"), ("time", "escape_time")):
        if hasattr(exc, attr):
            residuals[key] = getattr(exc, attr)
    if isinstance(exc, RiccatiConvergenceError):
        residuals["boundary"] = exc.residual
    iterations = getattr(exc, "iterations", 0)
    return Outcome(BREAKDOWN, EXIT_NOT_CONVERGED, iterations, residuals, notes=[f"{type(exc).__name__}: {exc}"])


HANDLERS = {
    "validate": _run_validate,
    "steer-sdp": _run_sdp,
    "steer-riccati": _run_riccati,
    "steer-pde": _run_pde,
    "simulate": _run_simulate,
}


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    num = cfg.numeric
    changes = {
        key: value
        for key, value in (("N", args.steps), ("tol", args.tol), ("seed", args.seed), ("paths", args.paths))
        if value is not None
    }
    if changes:
        cfg = replace(cfg, numeric=replace(num, **changes))
    if args.out:
        cfg = replace(cfg, out_dir=Path(args.out))
    return cfg


def run(config_path: Path, subcommand: str, args: argparse.Namespace | None = None) -> int:
    """Execute one subcommand; returns the process exit code."""
    args = args or build_parser().parse_args([subcommand, "--config", str(config_path)])
    started = time.perf_counter()
    cfg = None
    try:
        if subcommand not in HANDLERS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        cfg = apply_overrides(load_config(Path(config_path)), args)
        if args.steps is not None and args.steps < 1:
            raise ConfigError("--steps must be positive")
        expected = STEER_METHODS.get(subcommand)
        if expected and cfg.method not in (None, expected):
            raise ConfigError(f"{subcommand} cannot run a configuration written for method {cfg.method!r}")
        outcome = HANDLERS[subcommand](cfg, args)
    except InvalidProblemError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        for check in exc.report.checks:
            mark = "ok " if check.passed else "FAIL"
            print(f"   [{mark}] {check.name}: margin {check.margin:.6g} {check.detail}", file=sys.stderr)
        return EXIT_ERROR
    except ArithmeticError as exc:
        print(f"❌ {exc}", file=sys.stderr)
        if cfg is None:
            return EXIT_ERROR
        logger.warning("%s breakdown: %s", subcommand, exc)
        outcome = _breakdown(exc)
    except (SteeringError, ValueError) as exc:
        print(f"❌ {exc}", file=sys.stderr)
        return EXIT_ERROR

    manifest = {
        "config_sha256": cfg.sha256,
        "method": subcommand,
        "n": cfg.problem.n,
        "m": cfg.problem.m,
        "N": cfg.numeric.N,
        "tol": cfg.numeric.tol,
        "iterations": outcome.iterations,
        "residuals": outcome.residuals,
        "objective": outcome.objective,
        "wall_ms": round((time.perf_counter() - started) * 1000.0, 3),
        "status": outcome.status,
    }
    path = results.write_manifest(cfg.out_dir, **manifest)
    if "md" in cfg.formats:
        results.save_report(cfg.out_dir, manifest, [*outcome.artifacts, path], outcome.notes)

    if outcome.exit_code == EXIT_OK:
        print(f"✅ {subcommand}: {outcome.status} ({outcome.iterations} iterations) -> {cfg.out_dir}")
    else:
        print(f"⚠️ {subcommand}: {outcome.status}; residuals {outcome.residuals}", file=sys.stderr)
    return outcome.exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="steer",
        description="Optimal steering of inertial particles: Riccati, SDP, grid Schrödinger system, Monte Carlo",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="TOML run configuration")
        p.add_argument("--out", type=Path, help="Output directory (overrides [output].dir)")
        p.add_argument("--steps", type=int, help="Number of time intervals N")
        p.add_argument("--tol", type=float, help="Solver tolerance")
        p.add_argument("--seed", type=int, help="Random seed for simulate")
        p.add_argument("--paths", type=int, help="Number of simulated paths")
        p.add_argument("--gains", type=Path, help="gains.csv to simulate with")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL.upper(), logging.WARNING),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    args = build_parser().parse_args(argv)
    return run(args.config, args.command, args)


if __name__ == "__main__":
    raise SystemExit(main())
