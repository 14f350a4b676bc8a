"""
Time-discretized covariance steering as a semidefinite program.

Per interval k the block M_k = [[Y_k, U_k′], [U_k, Σ_k]] must be PSD; explicit Euler ties
Σ_{k+1} to (Σ_k, U_k) affinely, and Σ_0 = Σ₀, Σ_N = Σ_T are fixed. The program is solved by
ADMM in projection form: an affine projection through a KKT system factorized once, and
blockwise eigenvalue clipping onto the PSD cone.
"""

import logging
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import norm as spla_norm
from scipy.sparse.linalg import splu

from src.config import (
    AFFINE_FEASIBILITY_TOL,
    KKT_REFINE_STEPS,
    KKT_REGULARIZATION,
    SDP_EPS,
    SDP_MAX_ITERS,
    SDP_OVER_RELAXATION,
    SDP_RHO,
)
from src.core_model import (
    CovariancePath,
    GainSchedule,
    SteeringProblem,
    TimeGrid,
    symmetrize,
    validate_problem,
)
from src.errors import InvalidProblemError, SingularCovarianceError, SymmetryError

logger = logging.getLogger(__name__)

CONVERGED = "converged"
ITERATION_CAP = "iteration-cap"
INFEASIBLE = "infeasible-detected"

DIVERGENCE_LIMIT = 1e10
ADAPT_EVERY = 25
LOG_EVERY = 500


# --- Symmetric vectorization ---


def _svec_index(d: int):
    rows, cols = np.tril_indices(d)
    weights = np.where(rows == cols, 1.0, np.sqrt(2.0))
    return rows, cols, weights


def svec(M: np.ndarray) -> np.ndarray:
    """Lower triangle with off-diagonals scaled by √2, so ⟨svec A, svec B⟩ = tr(AB)."""
    M = np.asarray(M, dtype=float)
    rows, cols, w = _svec_index(M.shape[-1])
    return M[..., rows, cols] * w


def smat(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    q = v.shape[-1]
    d = int(round((np.sqrt(8 * q + 1) - 1) / 2))
    rows, cols, w = _svec_index(d)
    M = np.zeros(v.shape[:-1] + (d, d))
    M[..., rows, cols] = v / w
    M[..., cols, rows] = v / w
    return M


def euler_step(A, B, dt: float, Sigma, U) -> np.ndarray:
    """Σ + dt(AΣ + ΣA′ + BU′ + UB′ + BB′)."""
    A, B, Sigma = np.atleast_2d(A), np.atleast_2d(B), np.atleast_2d(Sigma)
    U = np.asarray(U, dtype=float).reshape(B.shape)
    return Sigma + dt * (A @ Sigma + Sigma @ A.T + B @ U.T + U @ B.T + B @ B.T)


# --- Program ---


@dataclass(frozen=True, eq=False)
class DiscreteSteeringProgram:
    grid: TimeGrid
    A: np.ndarray
    B: np.ndarray
    S: np.ndarray  # (N+1, n, n)
    Sigma0: np.ndarray
    SigmaT: np.ndarray
    E: sp.csc_matrix  # affine constraints E x = f on the stacked svec blocks
    f: np.ndarray
    c: np.ndarray  # Σ_k dt_k [tr Y_k + tr(S_k Σ_k)] as a linear functional of x

    @property
    def N(self) -> int:
        return self.grid.N

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def block_size(self) -> int:
        return self.n + self.m

    @property
    def block_dim(self) -> int:
        d = self.block_size
        return d * (d + 1) // 2

    @property
    def block_counts(self) -> dict:
        return {"Sigma": self.N + 1, "U": self.N, "Y": self.N}

    def blocks(self, x: np.ndarray) -> np.ndarray:
        return smat(x.reshape(self.N, self.block_dim))

    def unpack(self, x: np.ndarray):
        """(Σ_0..Σ_N, U_0..U_{N-1}, Y_0..Y_{N-1}) with the boundary slots set exactly."""
        M = self.blocks(x)
        m = self.m
        Sigma = np.empty((self.N + 1, self.n, self.n))
        Sigma[:-1] = symmetrize(M[:, m:, m:])
        Sigma[0] = self.Sigma0
        Sigma[-1] = self.SigmaT
        U = M[:, m:, :m].copy()
        Y = symmetrize(M[:, :m, :m])
        return Sigma, U, Y

    def pack(self, Sigma: np.ndarray, U: np.ndarray, Y: np.ndarray) -> np.ndarray:
        m = self.m
        M = np.zeros((self.N, self.block_size, self.block_size))
        M[:, :m, :m] = Y
        M[:, m:, :m] = U
        M[:, :m, m:] = np.swapaxes(U, 1, 2)
        M[:, m:, m:] = Sigma[: self.N]
        return svec(M).ravel()


def _block_maps(A: np.ndarray, B: np.ndarray):
    """Dense maps svec(M) -> svec(Σ) and svec(M) -> svec(AΣ + ΣA′ + BU′ + UB′)."""
    n, m = B.shape
    d = n + m
    q = d * (d + 1) // 2
    basis = smat(np.eye(q))
    Sig = basis[:, m:, m:]
    U = basis[:, m:, :m]
    drift = A @ Sig + Sig @ A.T + B @ np.swapaxes(U, 1, 2) + U @ B.T
    return svec(Sig).T, svec(drift).T


def discretize(p: SteeringProblem, N: int, check: bool = True) -> DiscreteSteeringProgram:
    """
    Explicit-Euler program on a uniform grid of N intervals. check=False skips the
    well-posedness gate (frozen B = 0 programs are still meaningful).
    """
    if int(N) < 1:
        raise ValueError(f"need at least one interval, got N={N}")
    N = int(N)
    grid = TimeGrid.uniform(p.T, N)
    if check:
        report = validate_problem(p, grid)
        if not report.passed:
            raise InvalidProblemError(report)

    A, B = p.A, p.B
    n, m = p.n, p.m
    r = n * (n + 1) // 2
    dt = grid.dt
    Sel, D = _block_maps(A, B)
    q = Sel.shape[1]

    eye = sp.identity(N, format="csr")
    diag = sp.kron(eye, sp.csr_matrix(Sel))
    step = -(diag + sp.kron(sp.diags(dt), sp.csr_matrix(D)))
    pad = sp.csr_matrix((r, N * q))
    E = (sp.vstack([diag, pad]) + sp.vstack([pad, step])).tocsc()

    noise = svec(B @ B.T)
    f = np.empty((N + 1, r))
    f[0] = svec(p.Sigma0)
    f[1:] = dt[:, None] * noise
    f[-1] -= svec(p.SigmaT)

    S = np.array(p.S_on(grid))
    C = np.zeros((N, n + m, n + m))
    C[:, :m, :m] = np.eye(m)
    C[:, m:, m:] = S[:-1]
    c = (dt[:, None] * svec(C)).ravel()

    logger.debug("discretized program: N=%d, %d unknowns, %d equalities", N, E.shape[1], E.shape[0])
    return DiscreteSteeringProgram(
        grid=grid,
        A=A,
        B=B,
        S=S,
        Sigma0=p.Sigma0,
        SigmaT=p.SigmaT,
        E=E,
        f=f.ravel(),
        c=c,
    )


# --- Cone projection ---


def _clip_eigen(M: np.ndarray) -> np.ndarray:
    lam, Q = np.linalg.eigh(M)
    return (Q * np.maximum(lam, 0.0)[..., None, :]) @ np.swapaxes(Q, -1, -2)


def project_psd(M) -> np.ndarray:
    """Frobenius-nearest PSD matrix: negative eigenvalues clipped to zero."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if np.abs(M - M.T).max() > 1e-8 * max(1.0, np.abs(M).max()):
        raise SymmetryError("project_psd needs a symmetric matrix")
    return symmetrize(_clip_eigen(symmetrize(M)))


def verify_lmi(Y, U, Sigma) -> float:
    """Minimum eigenvalue of [[Y, U′], [U, Σ]]."""
    Sigma = np.atleast_2d(np.asarray(Sigma, dtype=float))
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    U = np.asarray(U, dtype=float).reshape(Sigma.shape[0], Y.shape[0])
    block = np.block([[Y, U.T], [U, Sigma]])
    return float(np.linalg.eigvalsh(symmetrize(block))[0])


def lmi_margins(Y: np.ndarray, U: np.ndarray, Sigma: np.ndarray) -> np.ndarray:
    """verify_lmi per interval for stacked Y (N,m,m), U (N,n,m) and Σ (N or N+1,n,n)."""
    return np.array([verify_lmi(Y[k], U[k], Sigma[k]) for k in range(len(Y))])


def dynamics_residuals(prog: DiscreteSteeringProgram, Sigma: np.ndarray, U: np.ndarray) -> np.ndarray:
    """‖Σ_{k+1} - Euler step from (Σ_k, U_k)‖_F for every interval."""
    out = np.empty(prog.N)
    for k, h in enumerate(prog.grid.dt):
        out[k] = np.linalg.norm(Sigma[k + 1] - euler_step(prog.A, prog.B, h, Sigma[k], U[k]))
    return out


def objective_value(prog: DiscreteSteeringProgram, Sigma: np.ndarray, Y: np.ndarray) -> float:
    """½ Σ_k dt_k [tr Y_k + tr(S_k Σ_k)], the discretized steering cost."""
    tr_y = np.trace(Y, axis1=1, axis2=2)
    tr_s = np.einsum("kij,kji->k", prog.S[:-1], Sigma[:-1])
    return float(0.5 * np.sum(prog.grid.dt * (tr_y + tr_s)))


# --- Solver ---


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = SDP_MAX_ITERS
    eps_primal: float = SDP_EPS
    eps_dual: float = SDP_EPS
    rho: float = SDP_RHO
    over_relaxation: float = SDP_OVER_RELAXATION
    adaptive_rho: bool = True
    regularization: float = KKT_REGULARIZATION

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        for name in ("eps_primal", "eps_dual"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {value}")
        if not self.rho > 0.0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if not 1.0 <= self.over_relaxation < 2.0:
            raise ValueError(f"over_relaxation must lie in [1, 2), got {self.over_relaxation}")


@dataclass(frozen=True)
class SolveStats:
    iterations: int
    primal_residual: float
    dual_residual: float
    objective_value: float
    status: str
    rho: float = SDP_RHO

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


@dataclass(frozen=True, eq=False)
class SteeringSolution:
    grid: TimeGrid
    Sigma: np.ndarray  # (N+1, n, n)
    U: np.ndarray  # (N, n, m)
    Y: np.ndarray  # (N, m, m)
    stats: SolveStats

    def __iter__(self):
        return iter((self.Sigma, self.U, self.Y, self.stats))

    def gains(self) -> GainSchedule:
        return recover_gains(self.Sigma, self.U, self.grid)

    def covariance_path(self) -> CovariancePath:
        return CovariancePath(self.grid, self.Sigma)


class _AffineProjector:
    """
    Euclidean projection onto {x : Ex = f} via one sparse LU of the KKT matrix
    [[I, E′], [E, 0]]. If E lacks full row rank the exact matrix is singular; the
    factorization then falls back to the δ-regularized matrix and refines against the
    exact one, which removes the O(δ‖λ‖) bias on the consistent part of f.
    """

    def __init__(self, E: sp.csc_matrix, f: np.ndarray, delta: float):
        self.E = E
        self.f = f
        self.nx = E.shape[1]
        ne = E.shape[0]
        self.K = sp.bmat([[sp.identity(self.nx), E.T], [E, None]], format="csc")
        self.regularized = False
        self.refine_steps = 1
        try:
            self.lu = splu(self.K)
            ones = np.ones(self.nx + ne)
            trial = self.lu.solve(ones)
            if not np.all(np.isfinite(trial)) or np.linalg.norm(self.K @ trial - ones) > 1e-6 * np.linalg.norm(ones):
                raise RuntimeError("KKT factor is numerically singular")
        except RuntimeError as exc:
            logger.debug("exact KKT factorization failed (%s); regularizing with δ=%.1e", exc, delta)
            self.lu = splu((self.K - delta * sp.diags(np.r_[np.zeros(self.nx), np.ones(ne)])).tocsc())
            self.regularized = True
            self.refine_steps = KKT_REFINE_STEPS

    def __call__(self, v: np.ndarray) -> np.ndarray:
        rhs = np.concatenate([v, self.f])
        sol = self.lu.solve(rhs)
        for _ in range(self.refine_steps):
            sol += self.lu.solve(rhs - self.K @ sol)
        return sol[: self.nx]

    def violation(self, x: np.ndarray) -> float:
        return float(np.linalg.norm(self.E @ x - self.f))

    def tolerance(self, x: np.ndarray) -> float:
        """Violation gate relative to the size of f and of Ex."""
        scale = max(1.0, float(np.linalg.norm(self.f)), spla_norm(self.E) * float(np.linalg.norm(x)))
        return AFFINE_FEASIBILITY_TOL * scale


def _max_block_norm(v: np.ndarray, q: int) -> float:
    return float(np.linalg.norm(v.reshape(-1, q), axis=1).max())


def solve(prog: DiscreteSteeringProgram, opts: SolverOptions | None = None) -> SteeringSolution:
    """
    ADMM on min c′x over x ∈ {Ex = f} ∩ PSD blocks. Residuals are the largest per-block
    Frobenius norms of x - z (primal) and ρ(z - z_prev) (dual). Returns the affine iterate x,
    so dynamics hold to solver precision and LMI margins are bounded by the primal residual.
    """
    opts = opts or SolverOptions()
    q = prog.block_dim
    project_affine = _AffineProjector(prog.E, prog.f, opts.regularization)
    scale = float(np.mean(prog.grid.dt))
    c = prog.c / scale
    alpha = opts.over_relaxation
    rho = opts.rho

    def project_cone(v: np.ndarray) -> np.ndarray:
        return svec(_clip_eigen(smat(v.reshape(-1, q)))).ravel()

    x = project_affine(np.zeros(prog.E.shape[1]))
    violation = project_affine.violation(x)
    if violation > project_affine.tolerance(x):
        logger.warning("steering constraints are inconsistent (violation %.3e)", violation)
        return _finish(prog, x, 0, violation, 0.0, INFEASIBLE, rho)

    z = project_cone(x)
    w = np.zeros_like(x)
    best = (np.inf, x, np.inf, np.inf)
    status = ITERATION_CAP
    it = 0
    r = s = np.inf
    for it in range(1, opts.max_iters + 1):
        x = project_affine(z - w - c / rho)
        xh = alpha * x + (1.0 - alpha) * z
        z_prev = z
        z = project_cone(xh + w)
        w = w + xh - z

        r = _max_block_norm(x - z, q)
        s = rho * _max_block_norm(z - z_prev, q)
        if max(r, s) < best[0]:
            best = (max(r, s), x, r, s)
        if r <= opts.eps_primal and s <= opts.eps_dual:
            status = CONVERGED
            break
        if not np.isfinite(r) or np.linalg.norm(w) > DIVERGENCE_LIMIT:
            status = INFEASIBLE
            logger.warning("dual iterate diverges at iteration %d; treating as infeasible", it)
            break
        if opts.adaptive_rho and it % ADAPT_EVERY == 0:
            if r > 10.0 * s:
                rho *= 2.0
                w /= 2.0
            elif s > 10.0 * r:
                rho /= 2.0
                w *= 2.0
        if it % LOG_EVERY == 0:
            logger.debug("ADMM iteration %d: primal %.3e dual %.3e rho %.3g", it, r, s, rho)

    if status == CONVERGED:
        return _finish(prog, x, it, r, s, status, rho)
    if status == ITERATION_CAP:
        logger.warning(
            "ADMM stopped at the iteration cap (%d); best primal %.3e dual %.3e",
            it,
            best[2],
            best[3],
        )
    return _finish(prog, best[1], it, best[2], best[3], status, rho)


def _finish(prog, x, iterations, r, s, status, rho) -> SteeringSolution:
    Sigma, U, Y = prog.unpack(x)
    stats = SolveStats(
        iterations=iterations,
        primal_residual=float(r),
        dual_residual=float(s),
        objective_value=objective_value(prog, Sigma, Y),
        status=status,
        rho=rho,
    )
    logger.info("SDP %s after %d iterations, objective %.6g", status, iterations, stats.objective_value)
    return SteeringSolution(prog.grid, Sigma, U, Y, stats)


def recover_gains(Sigma: np.ndarray, U: np.ndarray, grid: TimeGrid | None = None) -> GainSchedule:
    """
    K_k = -U_k′ Σ_k⁻¹ on each interval. Sigma may hold N or N+1 samples; without a grid
    the gains are placed on unit steps.
    """
    U = np.asarray(U, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    if U.ndim == 2:
        U = U[None]
    if Sigma.ndim == 2:
        Sigma = Sigma[None]
    N = U.shape[0]
    if grid is None:
        grid = TimeGrid(np.arange(N + 1, dtype=float))
    K = np.empty((N, U.shape[2], U.shape[1]))
    for k in range(N):
        lam = np.linalg.eigvalsh(Sigma[k])[0]
        if lam <= 1e-10:
            raise SingularCovarianceError(k, lam)
        K[k] = -np.linalg.solve(Sigma[k], U[k]).T
    return GainSchedule(grid, K)
