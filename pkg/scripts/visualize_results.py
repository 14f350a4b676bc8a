#!/usr/bin/env python
"""
Render HTML reports for steering run directories.

Examples:
  python scripts/visualize_results.py results/inertial_s1
  python scripts/visualize_results.py results/inertial_s1 -o reports/s1.html --open
  python scripts/visualize_results.py results/inertial_s1 results/inertial_s10
"""

import argparse
import sys
import webbrowser
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from src.visualize import generate_html_report  # noqa: E402


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="HTML report (gains, covariance, sample paths) per run directory")
    parser.add_argument("runs", nargs="+", type=Path, help="Run directories containing manifest.json")
    parser.add_argument("-o", "--output", type=Path, help="Report path when a single run is given")
    parser.add_argument("--open", action="store_true", help="Open each report in the default browser")
    args = parser.parse_args(argv)

    output = args.output if len(args.runs) == 1 else None
    generated = []
    for run_dir in args.runs:
        try:
            html_path = generate_html_report(run_dir, output)
        except (OSError, ValueError) as exc:
            print(f"❌ {run_dir}: {exc}")
            continue
        print(f"✅ Generated: {html_path}")
        generated.append(html_path)
        if args.open:
            webbrowser.open(html_path.resolve().as_uri())

    if not generated:
        print("❌ No reports generated")
        return 1
    print(f"\n📊 {len(generated)} report(s) written")
    return 0


if __name__ == "__main__":
    sys.exit(main())
