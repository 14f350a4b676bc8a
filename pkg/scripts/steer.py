#!/usr/bin/env python
"""
Steering toolkit command line.

Examples:
  python scripts/steer.py validate --config data/configs/inertial_s1.toml
  python scripts/steer.py steer-sdp --config data/configs/inertial_s1.toml --out results/s1
  python scripts/steer.py simulate --config data/configs/inertial_s1.toml \
      --gains results/s1/gains.csv --paths 100 --seed 7 --out results/s1_paths
"""

import sys
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent
if str(PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(PROJECT_ROOT))

from src.cli import main  # noqa: E402

if __name__ == "__main__":
    raise SystemExit(main())
