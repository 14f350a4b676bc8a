"""
Steering problem data model.
Linear inertial dynamics dX = AX dt + Bu dt + B dw, boundary covariances, loss weight S(t),
well-posedness checks (SPD boundaries, PSD loss, controllability rank) and the reference
quantities every solver is measured against: covariance flows and the quadratic cost.
"""

import logging
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from src.config import PSD_TOL, RANK_TOL, VALIDATION_SAMPLES
from src.errors import DimensionError, GridMismatchError, SymmetryError

logger = logging.getLogger(__name__)

MatrixFunction = Callable[[float], np.ndarray]

SYMMETRY_ATOL = 1e-10


def _frozen(values, ndmin: int = 0) -> np.ndarray:
    arr = np.array(values, dtype=float, ndmin=ndmin)
    arr.setflags(write=False)
    return arr


def symmetrize(M: np.ndarray) -> np.ndarray:
    """Symmetric part ½(M + M′); works on stacks of matrices."""
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def min_eigenvalue(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(symmetrize(np.asarray(M, dtype=float)))[0])


def rk4_step(rhs: Callable[[float, np.ndarray], np.ndarray], t: float, y: np.ndarray, h: float) -> np.ndarray:
    """One classical fourth-order Runge-Kutta step; h may be negative for backward sweeps."""
    k1 = rhs(t, y)
    k2 = rhs(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = rhs(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = rhs(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# --- Time discretization ---


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Strictly increasing sample instants 0 = t_0 < ... < t_N = T."""

    t: np.ndarray

    def __post_init__(self):
        t = _frozen(np.ravel(np.asarray(self.t, dtype=float)))
        if t.size < 2:
            raise ValueError("a time grid needs at least two instants")
        if t[0] != 0.0:
            raise ValueError(f"time grids start at t=0 (got {t[0]})")
        if np.any(np.diff(t) <= 0.0):
            raise ValueError("time instants must be strictly increasing")
        object.__setattr__(self, "t", t)

    @classmethod
    def uniform(cls, T: float, N: int) -> "TimeGrid":
        if N < 1:
            raise ValueError(f"need at least one interval, got N={N}")
        if not T > 0.0:
            raise ValueError(f"horizon must be positive, got T={T}")
        t = np.linspace(0.0, T, N + 1)
        t[-1] = T
        return cls(t)

    @property
    def N(self) -> int:
        return self.t.size - 1

    @property
    def T(self) -> float:
        return float(self.t[-1])

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.t)

    def matches(self, other: "TimeGrid", rtol: float = 1e-12) -> bool:
        return self.N == other.N and bool(
            np.allclose(self.t, other.t, rtol=rtol, atol=rtol * self.T)
        )

    def interval_index(self, s: float) -> int:
        """Index k of the interval [t_k, t_{k+1}) containing s (last interval is closed)."""
        k = int(np.searchsorted(self.t, s, side="right")) - 1
        return min(max(k, 0), self.N - 1)


# --- Problem data ---


@dataclass(frozen=True, eq=False)
class SteeringProblem:
    """
    Covariance steering problem for dX = AX dt + Bu dt + B dw with loss ½x′S(t)x.
    S is either a constant matrix or a callable t -> matrix.
    """

    A: np.ndarray
    B: np.ndarray
    S: np.ndarray | MatrixFunction
    Sigma0: np.ndarray
    SigmaT: np.ndarray
    T: float

    def __post_init__(self):
        B = np.array(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(-1, 1)
        object.__setattr__(self, "A", _frozen(self.A, ndmin=2))
        object.__setattr__(self, "B", _frozen(B, ndmin=2))
        if not callable(self.S):
            object.__setattr__(self, "S", _frozen(self.S, ndmin=2))
        object.__setattr__(self, "Sigma0", _frozen(self.Sigma0, ndmin=2))
        object.__setattr__(self, "SigmaT", _frozen(self.SigmaT, ndmin=2))
        object.__setattr__(self, "T", float(self.T))

    @classmethod
    def constant(cls, A, B, Sigma0, SigmaT, T: float, S=None) -> "SteeringProblem":
        """Problem with a constant loss weight (zero when S is omitted)."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        if S is None:
            S = np.zeros_like(A)
        elif np.isscalar(S):
            S = float(S) * np.eye(A.shape[0])
        return cls(A=A, B=B, S=S, Sigma0=Sigma0, SigmaT=SigmaT, T=T)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def noise(self) -> np.ndarray:
        """BB′, the (possibly singular) diffusion matrix."""
        return self.B @ self.B.T

    def S_at(self, t: float) -> np.ndarray:
        if callable(self.S):
            return np.atleast_2d(np.asarray(self.S(t), dtype=float))
        return self.S

    def S_on(self, grid: TimeGrid) -> np.ndarray:
        """Loss weight sampled at every grid instant, shape (N+1, n, n)."""
        if callable(self.S):
            return np.stack([self.S_at(s) for s in grid.t])
        return np.broadcast_to(self.S, (grid.N + 1,) + self.S.shape)

    def with_S(self, S) -> "SteeringProblem":
        if np.isscalar(S):
            S = float(S) * np.eye(self.n)
        return replace(self, S=S)


def inertial_problem(S_scale: float = 1.0) -> SteeringProblem:
    """Double integrator dx = v dt, dv = u dt + dw steered from 2I to ¼I over T=1."""
    return SteeringProblem.constant(
        A=[[0.0, 1.0], [0.0, 0.0]],
        B=[[0.0], [1.0]],
        Sigma0=2.0 * np.eye(2),
        SigmaT=0.25 * np.eye(2),
        T=1.0,
        S=S_scale,
    )


# --- Covariance paths and gains ---


@dataclass(frozen=True, eq=False)
class CovariancePath:
    grid: TimeGrid
    Sigma: np.ndarray  # (N+1, n, n)

    def __post_init__(self):
        Sigma = _frozen(self.Sigma)
        if Sigma.ndim != 3 or Sigma.shape[0] != self.grid.N + 1:
            raise DimensionError(
                f"expected {self.grid.N + 1} covariance samples, got shape {Sigma.shape}"
            )
        asym = np.abs(Sigma - np.swapaxes(Sigma, 1, 2)).max()
        if asym > SYMMETRY_ATOL:
            raise SymmetryError(f"covariance samples are not symmetric (|M-M'|={asym:.2e})")
        lam = np.linalg.eigvalsh(Sigma)[:, 0]
        if lam.min() < -1e-10:
            k = int(np.argmin(lam))
            raise ValueError(f"covariance at index {k} is not PSD (eigenvalue {lam[k]:.3e})")
        object.__setattr__(self, "Sigma", Sigma)

    @property
    def n(self) -> int:
        return self.Sigma.shape[1]

    def at_index(self, k: int) -> np.ndarray:
        return self.Sigma[k]


@dataclass(frozen=True, eq=False)
class GainSchedule:
    """Feedback gains u = -K_k x, constant on each grid interval [t_k, t_{k+1})."""

    grid: TimeGrid
    K: np.ndarray  # (N, m, n)
    interpolation: str = "piecewise-constant"

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        if K.ndim == 2:
            K = K[:, None, :]
        if K.ndim != 3 or K.shape[0] != self.grid.N:
            raise DimensionError(
                f"expected one gain per interval ({self.grid.N}), got shape {K.shape}"
            )
        if not np.all(np.isfinite(K)):
            raise ValueError("gain schedule contains non-finite entries")
        K.setflags(write=False)
        object.__setattr__(self, "K", K)

    @classmethod
    def zeros(cls, grid: TimeGrid, m: int, n: int) -> "GainSchedule":
        return cls(grid, np.zeros((grid.N, m, n)))

    @property
    def m(self) -> int:
        return self.K.shape[1]

    @property
    def n(self) -> int:
        return self.K.shape[2]

    def at(self, s: float) -> np.ndarray:
        return self.K[self.grid.interval_index(s)]


# --- Well-posedness ---


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    margin: float
    detail: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]
    controllability_rank: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "passed": self.passed,
            "controllability_rank": self.controllability_rank,
            "checks": [
                {"name": c.name, "passed": c.passed, "margin": c.margin, "detail": c.detail}
                for c in self.checks
            ],
        }


def check_dimensions(p: SteeringProblem) -> None:
    """Raise DimensionError unless A, B, S, Sigma0, SigmaT agree on n (and B on m)."""
    n = p.A.shape[0]
    if p.A.shape != (n, n):
        raise DimensionError(f"A must be square, got {p.A.shape}")
    if p.B.shape[0] != n:
        raise DimensionError(f"B must have {n} rows, got {p.B.shape}")
    for name, M in (("Sigma0", p.Sigma0), ("SigmaT", p.SigmaT), ("S", p.S_at(0.0))):
        if M.shape != (n, n):
            raise DimensionError(f"{name} must be {n}x{n}, got {M.shape}")


def controllability_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """[B, AB, ..., A^(n-1)B]."""
    A = np.atleast_2d(A)
    blocks = [np.atleast_2d(B).reshape(A.shape[0], -1)]
    for _ in range(A.shape[0] - 1):
        blocks.append(A @ blocks[-1])
    return np.hstack(blocks)


def numerical_rank(M: np.ndarray, rtol: float = RANK_TOL) -> int:
    s = np.linalg.svd(np.atleast_2d(M), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def controllability_rank(A: np.ndarray, B: np.ndarray) -> int:
    return numerical_rank(controllability_matrix(A, B))


def _definiteness_check(name: str, M: np.ndarray, strict: bool) -> CheckResult:
    M = np.asarray(M, dtype=float)
    scale = float(np.linalg.norm(M, 2)) if M.size else 0.0
    if np.abs(M - M.T).max(initial=0.0) > SYMMETRY_ATOL * max(1.0, scale):
        return CheckResult(name, False, float("nan"), "not symmetric")
    lam = min_eigenvalue(M)
    tol = PSD_TOL * scale
    passed = lam > tol if strict else lam >= -tol
    return CheckResult(name, bool(passed), lam, f"min eigenvalue {lam:.6g}")


def validate_problem(p: SteeringProblem, grid: TimeGrid | None = None) -> ValidationReport:
    """
    Well-posedness report: SPD boundaries, PSD loss weight on every grid sample,
    full column rank of B and Kalman controllability rank (the linear stand-in for
    hypoellipticity). Dimension mismatches raise DimensionError instead.
    """
    check_dimensions(p)
    n, m = p.n, p.m
    checks = [
        CheckResult("positive_horizon", bool(np.isfinite(p.T) and p.T > 0.0), p.T),
        _definiteness_check("spd_sigma0", p.Sigma0, strict=True),
        _definiteness_check("spd_sigmaT", p.SigmaT, strict=True),
    ]

    samples = grid.t if grid is not None else np.linspace(0.0, max(p.T, 0.0), VALIDATION_SAMPLES)
    s_checks = [_definiteness_check("psd_S", p.S_at(s), strict=False) for s in samples]
    worst = min(s_checks, key=lambda c: (c.passed, c.margin if np.isfinite(c.margin) else -np.inf))
    checks.append(
        CheckResult(
            "psd_S",
            all(c.passed for c in s_checks),
            worst.margin,
            f"{len(s_checks)} samples; worst {worst.detail}",
        )
    )

    rank_B = numerical_rank(p.B)
    checks.append(CheckResult("full_column_rank_B", rank_B == m, float(rank_B - m), f"rank {rank_B} of {m}"))

    rank_C = controllability_rank(p.A, p.B)
    checks.append(
        CheckResult(
            "controllability_rank",
            rank_C == n,
            float(rank_C - n),
            f"rank {rank_C} of {n}",
        )
    )
    report = ValidationReport(tuple(checks), rank_C)
    logger.debug("validation report: %s", report.as_dict())
    return report


# --- Reference quantities ---


def propagate_covariance(
    p: SteeringProblem,
    gains: GainSchedule | None = None,
    grid: TimeGrid | None = None,
    scheme: str = "rk4",
) -> CovariancePath:
    """
    Closed-loop Lyapunov flow Σ' = (A-BK)Σ + Σ(A-BK)′ + BB′ from Σ(0)=Σ₀ with gains held
    constant on each interval. scheme="euler" reproduces the SDP's discrete dynamics exactly.
    """
    if gains is None and grid is None:
        raise ValueError("need a grid or a gain schedule")
    if grid is None:
        grid = gains.grid
    if gains is not None and not gains.grid.matches(grid):
        raise GridMismatchError("gain schedule and time grid differ")
    if scheme not in ("rk4", "euler"):
        raise ValueError(f"unknown scheme {scheme!r}")

    A, B, BBt = p.A, p.B, p.noise
    Sigma = np.empty((grid.N + 1, p.n, p.n))
    Sigma[0] = p.Sigma0
    for k, h in enumerate(grid.dt):
        Acl = A - B @ gains.K[k] if gains is not None else A

        def rhs(_t, X, Acl=Acl):
            return Acl @ X + X @ Acl.T + BBt

        if scheme == "euler":
            nxt = Sigma[k] + h * rhs(grid.t[k], Sigma[k])
        else:
            nxt = rk4_step(rhs, grid.t[k], Sigma[k], h)
        Sigma[k + 1] = symmetrize(nxt)
    return CovariancePath(grid, Sigma)


def uncontrolled_covariance(p: SteeringProblem, g: TimeGrid) -> CovariancePath:
    """Prior covariance flow Σ' = AΣ + ΣA′ + BB′ (no feedback)."""
    return propagate_covariance(p, None, g)


def cost_functional(p: SteeringProblem, k: GainSchedule, c: CovariancePath) -> float:
    """½ Σ_k [tr(K_k Σ_k K_k′) + tr(S_k Σ_k)] dt_k, left endpoint on the gain intervals."""
    if not k.grid.matches(c.grid):
        raise GridMismatchError("gain schedule and covariance path are on different grids")
    Sig = c.Sigma[:-1]
    S = p.S_on(c.grid)[:-1]
    control = np.einsum("kij,kjl,kil->k", k.K, Sig, k.K)
    state = np.einsum("kij,kji->k", S, Sig)
    return float(0.5 * np.sum((control + state) * c.grid.dt))
