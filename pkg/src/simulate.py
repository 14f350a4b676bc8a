"""
Closed-loop Monte Carlo for dX = (A - BK)X dt + B dw.

Every path draws from its own PCG64 stream seeded by (seed, path_id), so ensembles are
identical regardless of how many worker threads generate them.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from src.config import worker_count
from src.core_model import GainSchedule, SteeringProblem, TimeGrid, symmetrize
from src.errors import DimensionError, GridMismatchError

logger = logging.getLogger(__name__)

CHUNK_PATHS = 256


@dataclass(frozen=True, eq=False)
class Trajectory:
    grid: TimeGrid
    states: np.ndarray  # (N+1, n)
    controls: np.ndarray  # (N+1, m)
    path_id: int = 0


@dataclass(frozen=True, eq=False)
class Ensemble:
    grid: TimeGrid
    states: np.ndarray  # (paths, N+1, n)
    controls: np.ndarray  # (paths, N+1, m)
    seed: int

    def __post_init__(self):
        if self.states.shape[1] != self.grid.N + 1 or self.controls.shape[:2] != self.states.shape[:2]:
            raise DimensionError("trajectory arrays do not match the time grid")

    def __len__(self) -> int:
        return self.states.shape[0]

    def __getitem__(self, i: int) -> Trajectory:
        return Trajectory(self.grid, self.states[i], self.controls[i], path_id=i)

    def __iter__(self):
        return (self[i] for i in range(len(self)))


@dataclass(frozen=True)
class EnsembleStats:
    mean: np.ndarray  # (N+1, n)
    covariance: np.ndarray  # (N+1, n, n)
    cost_mean: float
    cost_stderr: float
    seed: int
    count: int


def _path_rng(seed: int, path_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(path_id)]))


def _simulate_chunk(p: SteeringProblem, k: GainSchedule, ids: range, seed: int, substeps: int):
    grid = k.grid
    n, m, N = p.n, p.m, grid.N
    chol = np.linalg.cholesky(p.Sigma0)
    z0 = np.empty((len(ids), n))
    noise = np.empty((len(ids), N * substeps, m))
    for row, pid in enumerate(ids):
        rng = _path_rng(seed, pid)
        z0[row] = rng.standard_normal(n)
        noise[row] = rng.standard_normal((N * substeps, m))

    X = np.empty((len(ids), N + 1, n))
    U = np.empty((len(ids), N + 1, m))
    X[:, 0] = z0 @ chol.T
    A, B = p.A, p.B
    for j, dt in enumerate(grid.dt):
        K = k.K[j]
        Acl = A - B @ K
        h = dt / substeps
        x = X[:, j]
        U[:, j] = -x @ K.T
        for s in range(substeps):
            xi = noise[:, j * substeps + s]
            x = x + h * (x @ Acl.T) + np.sqrt(h) * (xi @ B.T)
        X[:, j + 1] = x
    U[:, N] = -X[:, N] @ k.K[-1].T
    return X, U


def sample_paths(
    p: SteeringProblem,
    k: GainSchedule,
    count: int,
    seed: int,
    substeps: int = 1,
) -> Ensemble:
    """
    Euler-Maruyama paths with X₀ ~ N(0, Σ₀) drawn through the Cholesky factor of Σ₀.
    Controls u = -K_j X_j are recorded at every grid time (the last gain is reused at t_N).
    """
    if count < 1:
        raise ValueError("need at least one path")
    if substeps < 1:
        raise ValueError("substeps must be positive")
    if abs(k.grid.T - p.T) > 1e-12 * max(1.0, p.T):
        raise GridMismatchError(f"gains cover [0, {k.grid.T}], problem horizon is {p.T}")
    if (k.m, k.n) != (p.m, p.n):
        raise DimensionError(f"gains are {k.m}x{k.n}, problem needs {p.m}x{p.n}")

    chunks = [range(i, min(i + CHUNK_PATHS, count)) for i in range(0, count, CHUNK_PATHS)]
    workers = max(1, min(worker_count(), len(chunks)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(lambda ids: _simulate_chunk(p, k, ids, seed, substeps), chunks))
    states = np.concatenate([x for x, _ in parts])
    controls = np.concatenate([u for _, u in parts])
    logger.debug("simulated %d paths on %d threads (seed %d)", count, workers, seed)
    return Ensemble(k.grid, states, controls, int(seed))


def empirical_covariance(trajs: Ensemble, index: int) -> np.ndarray:
    """Unbiased sample covariance of the states at one time index."""
    if len(trajs) < 2:
        raise ValueError("need at least two paths for a sample covariance")
    X = trajs.states[:, index, :]
    d = X - X.mean(axis=0)
    return symmetrize(d.T @ d / (X.shape[0] - 1))


def _covariance_curve(states: np.ndarray) -> np.ndarray:
    d = states - states.mean(axis=0)
    return symmetrize(np.einsum("pti,ptj->tij", d, d) / (states.shape[0] - 1))


def _loss_weights(S, grid: TimeGrid, n: int) -> np.ndarray:
    if isinstance(S, SteeringProblem):
        return np.asarray(S.S_on(grid))
    if callable(S):
        return np.stack([np.atleast_2d(S(t)) for t in grid.t])
    S = np.atleast_2d(np.asarray(S, dtype=float))
    return np.broadcast_to(S, (grid.N + 1, n, n))


def path_costs(trajs: Ensemble, k: GainSchedule, S) -> np.ndarray:
    """Per-path left-endpoint quadrature of ½‖K_jX_j‖² + ½X_j′S_jX_j."""
    if not k.grid.matches(trajs.grid):
        raise GridMismatchError("gain schedule and trajectories are on different grids")
    X = trajs.states[:, :-1, :]
    W = _loss_weights(S, trajs.grid, X.shape[-1])[:-1]
    u = np.einsum("jmn,pjn->pjm", k.K, X)
    running = 0.5 * (np.sum(u**2, axis=-1) + np.einsum("pji,jik,pjk->pj", X, W, X))
    return running @ trajs.grid.dt


def estimate_cost(trajs: Ensemble, k: GainSchedule, S) -> tuple[float, float]:
    """Ensemble mean and standard error of the path costs."""
    costs = path_costs(trajs, k, S)
    se = float(costs.std(ddof=1) / np.sqrt(costs.size)) if costs.size > 1 else float("nan")
    return float(costs.mean()), se


def ensemble_stats(trajs: Ensemble, k: GainSchedule, S) -> EnsembleStats:
    cost_mean, cost_se = estimate_cost(trajs, k, S)
    cov = _covariance_curve(trajs.states) if len(trajs) > 1 else np.zeros(trajs.states.shape[1:] + trajs.states.shape[-1:])
    return EnsembleStats(
        mean=trajs.states.mean(axis=0),
        covariance=cov,
        cost_mean=cost_mean,
        cost_stderr=cost_se,
        seed=trajs.seed,
        count=len(trajs),
    )


def bootstrap_covariance_bands(trajs: Ensemble, resamples: int = 100, seed: int = 0):
    """
    Sample covariance curve and its bootstrap standard deviation over resampled path sets,
    both of shape (N+1, n, n).
    """
    if len(trajs) < 2:
        raise ValueError("need at least two paths to bootstrap")
    rng = np.random.default_rng(seed)
    P = len(trajs)
    draws = np.empty((resamples,) + trajs.states.shape[1:] + trajs.states.shape[-1:])
    for r in range(resamples):
        draws[r] = _covariance_curve(trajs.states[rng.integers(0, P, size=P)])
    return _covariance_curve(trajs.states), draws.std(axis=0, ddof=1)


def fraction_within_bands(reference: np.ndarray, center: np.ndarray, spread: np.ndarray, width: float = 3.0) -> float:
    """Share of (time, upper-triangle entry) pairs with |reference - center| <= width·spread."""
    n = reference.shape[-1]
    iu = np.triu_indices(n)
    gap = np.abs(reference - center)[:, iu[0], iu[1]]
    band = width * spread[:, iu[0], iu[1]]
    return float(np.mean(gap <= band))
