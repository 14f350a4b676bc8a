"""Inertial particle steering toolkit: coupled Riccati, SDP, grid Schrödinger system, Monte Carlo."""

from src.config import (
    CONFIG_DIR,
    DATA_DIR,
    PROJECT_ROOT,
    REFERENCE_CONFIG,
    RESULTS_DIR,
)

__all__ = [
    "CONFIG_DIR",
    "DATA_DIR",
    "PROJECT_ROOT",
    "REFERENCE_CONFIG",
    "RESULTS_DIR",
]
