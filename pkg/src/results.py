"""
Result artifacts: CSV tables, the run manifest and an optional Markdown report.
Every file is written atomically (temporary file in the target directory, then rename).
"""

import csv
import hashlib
import io
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from src.config import CSV_FLOAT_FORMAT, MANIFEST_NAME
from src.core_model import CovariancePath, GainSchedule, TimeGrid
from src.errors import ConfigError, DimensionError

MANIFEST_KEYS = (
    "config_sha256",
    "method",
    "n",
    "m",
    "N",
    "tol",
    "iterations",
    "residuals",
    "objective",
    "wall_ms",
    "status",
)


def atomic_write_text(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fp:
            fp.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def fmt(x: float) -> str:
    return format(float(x), CSV_FLOAT_FORMAT)


def sha256_of(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_csv(path: Path, header: list[str], rows) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([cell if isinstance(cell, str) else fmt(cell) for cell in row])
    return atomic_write_text(path, buf.getvalue())


def write_json(path: Path, payload: dict) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


# --- Column schemas ---


def gains_header(m: int, n: int) -> list[str]:
    return ["t"] + [f"k{i + 1}" for i in range(m * n)]


def covariance_header(n: int, prefix: str = "sigma") -> list[str]:
    rows, cols = np.triu_indices(n)
    return [f"{prefix}{i + 1}{j + 1}" for i, j in zip(rows, cols)]


def write_gains_csv(path: Path, gains: GainSchedule) -> Path:
    """One row per interval: t_k, then K_k flattened row-major."""
    K = gains.K.reshape(gains.grid.N, -1)
    rows = ([t, *k] for t, k in zip(gains.grid.t[:-1], K))
    return write_csv(path, gains_header(gains.m, gains.n), rows)


def read_gains_csv(path: Path, T: float, n: int) -> GainSchedule:
    """Inverse of write_gains_csv; T closes the grid and n fixes the row-major shape."""
    with open(path, encoding="utf-8", newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        data = [[float(x) for x in row] for row in reader if row]
    if not header or header[0] != "t" or not data:
        raise ConfigError(f"{path} is not a gains table")
    table = np.array(data)
    width = table.shape[1] - 1
    if width % n:
        raise DimensionError(f"{width} gain columns cannot be reshaped for n={n}")
    grid = TimeGrid(np.append(table[:, 0], float(T)))
    return GainSchedule(grid, table[:, 1:].reshape(-1, width // n, n))


def write_covariance_csv(path: Path, cov: CovariancePath) -> Path:
    """One row per grid time: t, then the upper triangle of Σ row-major."""
    iu = np.triu_indices(cov.n)
    rows = ([t, *S[iu]] for t, S in zip(cov.grid.t, cov.Sigma))
    return write_csv(path, ["t"] + covariance_header(cov.n), rows)


def write_riccati_csv(path: Path, sol, n: int) -> Path:
    iu = np.triu_indices(n)
    header = ["t"] + covariance_header(n, "pi") + covariance_header(n, "h") + ["c", "chat"]
    rows = (
        [t, *P[iu], *H[iu], c, ch]
        for t, P, H, c, ch in zip(sol.grid.t, sol.Pi, sol.H, sol.c, sol.chat)
    )
    return write_csv(path, header, rows)


def write_paths_csv(path: Path, ensemble, state_names: list[str], control_names: list[str]) -> Path:
    """One row per (path, time): path_id, t, states, controls."""
    t = ensemble.grid.t

    def rows():
        for pid in range(len(ensemble)):
            X, U = ensemble.states[pid], ensemble.controls[pid]
            for j, tj in enumerate(t):
                yield [str(pid), tj, *X[j], *U[j]]

    return write_csv(path, ["path_id", "t", *state_names, *control_names], rows())


def write_field_csv(path: Path, mesh, grid, columns: dict[str, np.ndarray], times=None) -> Path:
    """Node table over selected time indices: t, coordinates x1.., then one column per field."""
    pts = mesh.points
    times = range(grid.N + 1) if times is None else times
    coords = [f"x{i + 1}" for i in range(mesh.ndim)]

    def rows():
        for k in times:
            for s in range(mesh.size):
                yield [grid.t[k], *pts[s], *(col[k][s] for col in columns.values())]

    return write_csv(path, ["t", *coords, *columns], rows())


# --- Manifest and report ---


def write_manifest(out_dir: Path, **fields) -> Path:
    """Manifest JSON with exactly the fixed key set; missing values are null."""
    unknown = set(fields) - set(MANIFEST_KEYS)
    if unknown:
        raise ValueError(f"unexpected manifest keys: {sorted(unknown)}")
    payload = {key: fields.get(key) for key in MANIFEST_KEYS}
    return write_json(Path(out_dir) / MANIFEST_NAME, payload)


def read_manifest(out_dir: Path) -> dict:
    return json.loads((Path(out_dir) / MANIFEST_NAME).read_text(encoding="utf-8"))


def save_report(out_dir: Path, manifest: dict, artifacts: list[Path], notes: list[str] | None = None) -> Path:
    """Markdown summary of one run next to its artifacts."""
    lines = [
        f"# Steering run: {manifest.get('method')}",
        "",
        f"- Status: **{manifest.get('status')}**",
        f"- Dimensions: n={manifest.get('n')}, m={manifest.get('m')}, N={manifest.get('N')}",
        f"- Tolerance: {manifest.get('tol')}",
        f"- Iterations: {manifest.get('iterations')}",
        f"- Objective: {manifest.get('objective')}",
        f"- Wall time: {manifest.get('wall_ms')} ms",
        f"- Config SHA-256: `{manifest.get('config_sha256')}`",
        "",
        "## Residuals",
        "",
    ]
    for name, value in (manifest.get("residuals") or {}).items():
        lines.append(f"- {name}: {value}")
    lines.extend(["", "## Artifacts", ""])
    lines.extend(f"- `{Path(a).name}`" for a in artifacts)
    if notes:
        lines.extend(["", "## Notes", ""])
        lines.extend(f"- {note}" for note in notes)
    return atomic_write_text(Path(out_dir) / "report.md", "\n".join(lines) + "\n")
