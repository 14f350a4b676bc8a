#!/usr/bin/env python3
"""Check steering runs against their acceptance gates.

Reads `manifest.json` from each run directory and exits non-zero if a run did not
converge or a residual exceeds its gate.
"""

import argparse
import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from src.results import read_manifest  # noqa: E402

OK_STATUSES = {"converged", "passed", "completed"}

# Upper bounds per residual name; residuals without a gate are reported only.
MAX_RESIDUALS = {
    "primal": 1e-5,
    "dual": 1e-5,
    "dynamics_max": 1e-5,
    "boundary": 1e-6,
    "sum_dynamics": 1e-6,
    "fortet": 1e-6,
    "terminal_l1": 5e-2,
    "terminal_covariance_rel": 0.05,
}
MIN_RESIDUALS = {
    "lmi_margin_min": -1e-5,
}


def check_run(run_dir: Path) -> list[str]:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.is_file():
        return [f"{run_dir}: missing manifest.json"]
    manifest = read_manifest(run_dir)

    failures: list[str] = []
    status = manifest.get("status")
    if status not in OK_STATUSES:
        failures.append(f"{run_dir}: status={status}")

    for name, value in (manifest.get("residuals") or {}).items():
        if value is None or isinstance(value, bool):
            continue
        if name in MAX_RESIDUALS and value > MAX_RESIDUALS[name]:
            failures.append(f"{run_dir}: {name}={value:.3e} > {MAX_RESIDUALS[name]}")
        if name in MIN_RESIDUALS and value < MIN_RESIDUALS[name]:
            failures.append(f"{run_dir}: {name}={value:.3e} < {MIN_RESIDUALS[name]}")
    return failures


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(description="Gate steering runs on status and residuals")
    parser.add_argument("runs", nargs="+", type=Path, help="Run directories containing manifest.json")
    args = parser.parse_args(argv)

    failures: list[str] = []
    for run_dir in args.runs:
        failures.extend(check_run(run_dir))

    if failures:
        print("❌ Acceptance gates failed:")
        for failure in failures:
            print(f"- {failure}")
        raise SystemExit(1)

    print(f"✅ All gates passed ({len(args.runs)} run(s))")


if __name__ == "__main__":
    main()
