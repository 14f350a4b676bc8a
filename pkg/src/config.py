"""Steering toolkit configuration. All paths, environment knobs and numeric defaults in one place."""

import os
from pathlib import Path

from dotenv import load_dotenv

load_dotenv()

# Base paths (project root = parent of src)
PROJECT_ROOT = Path(__file__).resolve().parent.parent
DATA_DIR = Path(os.getenv("STEER_DATA_DIR", str(PROJECT_ROOT / "data")))
CONFIG_DIR = DATA_DIR / "configs"
REFERENCE_CONFIG = CONFIG_DIR / "inertial_s1.toml"
RESULTS_DIR = Path(os.getenv("STEER_RESULTS_DIR", str(PROJECT_ROOT / "results")))

LOG_LEVEL = os.getenv("STEER_LOG_LEVEL", "WARNING")

# Well-posedness checks
PSD_TOL = 1e-10  # relative to the spectral norm of the checked matrix
RANK_TOL = 1e-8  # relative to the largest singular value
VALIDATION_SAMPLES = 101  # S(t) samples when no grid is given

# Riccati
BLOWUP_THRESHOLD = 1e12
RICCATI_TOL = 1e-6
RICCATI_MAX_ITERS = 50
RICCATI_FD_STEP = 1e-7
WARM_START_STEPS = 100

# SDP splitting solver
SDP_RHO = 1.0
SDP_OVER_RELAXATION = 1.6
SDP_EPS = 1e-6
SDP_MAX_ITERS = 50000
KKT_REGULARIZATION = 1e-10  # fallback only, when E lacks full row rank
KKT_REFINE_STEPS = 6
AFFINE_FEASIBILITY_TOL = 1e-8

# Schrödinger system on grids
FORTET_TOL = 1e-8
FORTET_MAX_ITERS = 1000
POSITIVITY_FLOOR = 1e-300

# Output
CSV_FLOAT_FORMAT = ".17g"
MANIFEST_NAME = "manifest.json"


def worker_count() -> int:
    """Worker cap for thread pools. Read at call time so STEER_THREADS can change between runs."""
    raw = os.getenv("STEER_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1
