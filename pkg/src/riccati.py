"""
Coupled Riccati equations of the linear-quadratic Schrödinger bridge.

    -Π' = A′Π + ΠA - ΠBB′Π + S        (backward factor)
    -H' = A′H + HA + HBB′H - S        (forward factor)
    Π(0) + H(0) = Σ₀⁻¹,  Π(T) + H(T) = Σ_T⁻¹

The split boundary coupling is solved by damped Newton shooting over the upper
triangle of Π(0), warm-started from the SDP gains.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.integrate import cumulative_trapezoid

from src.config import (
    BLOWUP_THRESHOLD,
    RICCATI_FD_STEP,
    RICCATI_MAX_ITERS,
    RICCATI_TOL,
    WARM_START_STEPS,
    worker_count,
)
from src.core_model import (
    CovariancePath,
    GainSchedule,
    SteeringProblem,
    TimeGrid,
    controllability_matrix,
    rk4_step,
    symmetrize,
    validate_problem,
)
from src.errors import (
    GridMismatchError,
    InvalidProblemError,
    RiccatiConvergenceError,
    RiccatiEscapeError,
    SingularCovarianceError,
    SymmetryError,
)

logger = logging.getLogger(__name__)

MAX_HALVINGS = 30
ROOT_MATCH_TOL = 1e-4


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    grid: TimeGrid
    Pi: np.ndarray  # (N+1, n, n)
    H: np.ndarray  # (N+1, n, n)
    c: np.ndarray  # (N+1,)
    chat: np.ndarray  # (N+1,)
    iterations: int = 0
    residual: float = 0.0
    start: str = ""

    @property
    def Q(self) -> np.ndarray:
        """Π + H, the inverse covariance along the bridge."""
        return self.Pi + self.H


# --- Flows ---


def _pi_rhs(p: SteeringProblem):
    A, BBt = p.A, p.noise

    def rhs(t, P):
        return -A.T @ P - P @ A + P @ BBt @ P - p.S_at(t)

    return rhs


def _h_rhs(p: SteeringProblem):
    A, BBt = p.A, p.noise

    def rhs(t, H):
        return -A.T @ H - H @ A - H @ BBt @ H + p.S_at(t)

    return rhs


def _check_symmetric(M: np.ndarray, name: str) -> np.ndarray:
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if np.abs(M - M.T).max() > 1e-10 * max(1.0, np.abs(M).max()):
        raise SymmetryError(f"{name} must be symmetric")
    return symmetrize(M)


def _sweep(rhs, grid: TimeGrid, start: np.ndarray, backward: bool, which: str) -> np.ndarray:
    out = np.empty((grid.N + 1,) + start.shape)
    order = range(grid.N, 0, -1) if backward else range(grid.N)
    first = grid.N if backward else 0
    out[first] = start
    for k in order:
        j = k - 1 if backward else k + 1
        h = grid.t[j] - grid.t[k]
        nxt = symmetrize(rk4_step(rhs, grid.t[k], out[k], h))
        if not np.all(np.isfinite(nxt)) or np.abs(nxt).max() > BLOWUP_THRESHOLD:
            raise RiccatiEscapeError(grid.t[j], which)
        out[j] = nxt
    return out


def integrate_pi_backward(p: SteeringProblem, g: TimeGrid, Pi_T) -> np.ndarray:
    """Π_k for k = 0..N, integrated from Π(T) = Pi_T towards t = 0."""
    return _sweep(_pi_rhs(p), g, _check_symmetric(Pi_T, "Pi_T"), backward=True, which="Pi")


def integrate_pi_forward(p: SteeringProblem, g: TimeGrid, Pi_0) -> np.ndarray:
    return _sweep(_pi_rhs(p), g, _check_symmetric(Pi_0, "Pi_0"), backward=False, which="Pi")


def integrate_h_forward(p: SteeringProblem, g: TimeGrid, H_0) -> np.ndarray:
    """H_k for k = 0..N, integrated from H(0) = H_0."""
    return _sweep(_h_rhs(p), g, _check_symmetric(H_0, "H_0"), backward=False, which="H")


# --- Shooting ---


def _upper(M: np.ndarray) -> np.ndarray:
    return M[np.triu_indices(M.shape[0])]


def _from_upper(theta: np.ndarray, n: int) -> np.ndarray:
    M = np.zeros((n, n))
    M[np.triu_indices(n)] = theta
    return M + M.T - np.diag(np.diag(M))


def _residual_vector(R: np.ndarray) -> np.ndarray:
    """Upper triangle with off-diagonals scaled by √2, so its 2-norm is ‖R‖_F."""
    n = R.shape[0]
    iu = np.triu_indices(n)
    w = np.where(iu[0] == iu[1], 1.0, np.sqrt(2.0))
    return R[iu] * w


class _Shooter:
    def __init__(self, p: SteeringProblem, g: TimeGrid):
        self.p = p
        self.g = g
        self.n = p.n
        self.Sigma0_inv = symmetrize(np.linalg.inv(p.Sigma0))
        self.SigmaT_inv = symmetrize(np.linalg.inv(p.SigmaT))

    def shoot(self, theta: np.ndarray):
        Pi0 = _from_upper(theta, self.n)
        Pi = _sweep(_pi_rhs(self.p), self.g, Pi0, backward=False, which="Pi")
        H = _sweep(_h_rhs(self.p), self.g, self.Sigma0_inv - Pi0, backward=False, which="H")
        F = _residual_vector(Pi[-1] + H[-1] - self.SigmaT_inv)
        return Pi, H, F

    def residual(self, theta: np.ndarray) -> np.ndarray:
        return self.shoot(theta)[2]

    def jacobian(self, theta: np.ndarray, F: np.ndarray) -> np.ndarray:
        def column(j: int) -> np.ndarray:
            eps = RICCATI_FD_STEP * max(1.0, abs(theta[j]))
            e = np.zeros_like(theta)
            e[j] = eps
            try:
                return (self.residual(theta + e) - F) / eps
            except RiccatiEscapeError:
                return (F - self.residual(theta - e)) / eps

        workers = max(1, min(worker_count(), theta.size))
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(column, range(theta.size)))
        return np.column_stack(cols)


def _newton(shooter: _Shooter, Pi0: np.ndarray, tol: float, max_iters: int):
    theta = _upper(symmetrize(np.asarray(Pi0, dtype=float)))
    Pi, H, F = shooter.shoot(theta)
    norm = float(np.linalg.norm(F))
    it = 0
    while norm > tol:
        if it >= max_iters:
            raise RiccatiConvergenceError(norm, it)
        it += 1
        J = shooter.jacobian(theta, F)
        step = np.linalg.lstsq(J, -F, rcond=None)[0]
        lam = 1.0
        for _ in range(MAX_HALVINGS):
            trial = theta + lam * step
            try:
                tPi, tH, tF = shooter.shoot(trial)
            except RiccatiEscapeError as exc:
                logger.debug("shooting trial escaped at t=%.4g, damping step", exc.time)
                lam *= 0.5
                continue
            tnorm = float(np.linalg.norm(tF))
            if tnorm < (1.0 - 1e-4 * lam) * norm:
                break
            lam *= 0.5
        else:
            raise RiccatiConvergenceError(norm, it)
        theta, Pi, H, F, norm = trial, tPi, tH, tF, tnorm
        logger.debug("shooting iteration %d: residual %.3e (step %.3g)", it, norm, lam)

    Q = Pi + H
    if np.linalg.eigvalsh(Q)[:, 0].min() <= 0.0:
        # converged onto a branch that crossed a pole; not a covariance bridge
        raise RiccatiConvergenceError(norm, it)
    return Pi, H, norm, it


def pi_from_gains(p: SteeringProblem, gains: GainSchedule) -> np.ndarray:
    """
    Estimate Π(0) from a gain trajectory K ≈ B′Π. The rows B′(A′)^jΠ follow from K and
    its time derivatives through the Π equation; Π(0) is the least-squares solution of
    C′Π = [B′Π; B′A′Π; ...] with C the controllability matrix.
    """
    A, B = p.A, p.B
    t = gains.grid.t[:-1]
    K = gains.K
    W = K.copy()
    rows = [W[0]]
    At_pow = np.eye(p.n)
    S = np.stack([p.S_at(s) for s in t])
    for _ in range(p.n - 1):
        dW = np.gradient(W, t, axis=0, edge_order=2) if t.size > 2 else np.zeros_like(W)
        W = -dW - W @ A + W @ B @ K - np.einsum("ij,kjl->kil", B.T @ At_pow, S)
        At_pow = At_pow @ A.T
        rows.append(W[0])
    C = controllability_matrix(A, B)
    Pi0 = np.linalg.lstsq(C.T, np.vstack(rows), rcond=None)[0]
    return symmetrize(Pi0)


def sdp_warm_start(p: SteeringProblem, steps: int = WARM_START_STEPS) -> np.ndarray:
    from src.sdp_steering import SolverOptions, discretize, recover_gains, solve

    prog = discretize(p, steps)
    sol = solve(prog, SolverOptions(eps_primal=1e-5, eps_dual=1e-5, max_iters=20000))
    return pi_from_gains(p, recover_gains(sol.Sigma, sol.U, prog.grid))


def _default_starts(p: SteeringProblem, warm_start: bool):
    S0_inv = symmetrize(np.linalg.inv(p.Sigma0))
    if warm_start:
        yield "sdp", lambda: sdp_warm_start(p)
    yield "zero", lambda: np.zeros((p.n, p.n))
    yield "half", lambda: 0.5 * S0_inv
    yield "full", lambda: S0_inv


def _solution(p, g, Pi, H, norm, it, label) -> RiccatiSolution:
    c, chat = _normalizer_curves(p, g, Pi, H)
    return RiccatiSolution(g, Pi, H, c, chat, iterations=it, residual=norm, start=label)


def _run_start(p, g, shooter, label, make_start, tol, max_iters) -> RiccatiSolution:
    Pi, H, norm, it = _newton(shooter, make_start(), tol, max_iters)
    logger.info("coupled Riccati converged from %s start in %d iterations (%.2e)", label, it, norm)
    return _solution(p, g, Pi, H, norm, it, label)


def solve_coupled(
    p: SteeringProblem,
    g: TimeGrid,
    init=None,
    *,
    tol: float = RICCATI_TOL,
    max_iters: int = RICCATI_MAX_ITERS,
    warm_start: bool = True,
) -> RiccatiSolution:
    """
    Solve the split-boundary Riccati pair on g. Starts from init when given, otherwise from
    Π(0) reconstructed from SDP gains; the fixed fallbacks 0, ½Σ₀⁻¹ and Σ₀⁻¹ are tried in turn
    when a start escapes or stalls.
    """
    report = validate_problem(p, g)
    if not report.passed:
        raise InvalidProblemError(report)
    shooter = _Shooter(p, g)
    starts = list(_default_starts(p, warm_start and init is None))
    if init is not None:
        starts.insert(0, ("init", lambda: np.atleast_2d(np.asarray(init, dtype=float))))

    failure: RiccatiConvergenceError | None = None
    for label, make_start in starts:
        try:
            return _run_start(p, g, shooter, label, make_start, tol, max_iters)
        except RiccatiEscapeError as exc:
            logger.warning("start %s escapes at t=%.4g", label, exc.time)
        except RiccatiConvergenceError as exc:
            logger.warning("start %s stalled at residual %.3e", label, exc.residual)
            if failure is None or exc.residual < failure.residual:
                failure = exc
        except (SingularCovarianceError, np.linalg.LinAlgError) as exc:
            logger.warning("start %s unavailable: %s", label, exc)
    raise failure or RiccatiConvergenceError(float("inf"), 0)


def find_coupled_roots(
    p: SteeringProblem,
    g: TimeGrid,
    starts=None,
    *,
    tol: float = RICCATI_TOL,
    max_iters: int = RICCATI_MAX_ITERS,
) -> list[RiccatiSolution]:
    """All distinct roots reached from the given Π(0) starts (default: the fallback set)."""
    report = validate_problem(p, g)
    if not report.passed:
        raise InvalidProblemError(report)
    shooter = _Shooter(p, g)
    if starts is None:
        labelled = list(_default_starts(p, warm_start=False))
    else:
        labelled = [
            (f"start{i}", lambda s=s: np.atleast_2d(np.asarray(s, dtype=float)))
            for i, s in enumerate(starts)
        ]

    roots: list[RiccatiSolution] = []
    for label, make_start in labelled:
        try:
            sol = _run_start(p, g, shooter, label, make_start, tol, max_iters)
        except (RiccatiEscapeError, RiccatiConvergenceError) as exc:
            logger.info("start %s found no root: %s", label, exc)
            continue
        scale = max(1.0, float(np.linalg.norm(sol.Pi[0])))
        if all(np.linalg.norm(sol.Pi[0] - r.Pi[0]) > ROOT_MATCH_TOL * scale for r in roots):
            roots.append(sol)
    if len(roots) > 1:
        logger.warning("coupled Riccati system has %d distinct roots on this grid", len(roots))
    return roots


# --- Derived quantities ---


def _normalizer_curves(p: SteeringProblem, g: TimeGrid, Pi: np.ndarray, H: np.ndarray):
    BBt = p.noise
    tr_pi = np.einsum("ij,kji->k", BBt, Pi)
    tr_h = np.trace(p.A) + 0.5 * np.einsum("ij,kji->k", BBt, H)
    c = np.exp(0.5 * cumulative_trapezoid(tr_pi, g.t, initial=0.0))
    chat = np.exp(-cumulative_trapezoid(tr_h, g.t, initial=0.0))
    return c, chat


def normalizers(sol: RiccatiSolution, p: SteeringProblem) -> tuple[np.ndarray, np.ndarray]:
    """c(t) = exp{½∫tr(BB′Π)}, ĉ(t) = exp{-∫tr(A + ½BB′H)} by the trapezoid rule; c₀ = ĉ₀ = 1."""
    return _normalizer_curves(p, sol.grid, sol.Pi, sol.H)


def consistency_residual(sol: RiccatiSolution, path: CovariancePath) -> float:
    """max_k ‖Σ_k⁻¹ - (Π_k + H_k)‖_F / ‖Σ_k⁻¹‖_F."""
    if not sol.grid.matches(path.grid):
        raise GridMismatchError("Riccati solution and covariance path are on different grids")
    worst = 0.0
    for k, Sig in enumerate(path.Sigma):
        lam = np.linalg.eigvalsh(Sig)[0]
        if lam <= 1e-10 * max(1.0, np.abs(Sig).max()):
            raise SingularCovarianceError(k, lam)
        inv = np.linalg.inv(Sig)
        worst = max(worst, np.linalg.norm(inv - sol.Q[k]) / np.linalg.norm(inv))
    return float(worst)


def riccati_gains(sol: RiccatiSolution, p: SteeringProblem) -> GainSchedule:
    """Optimal feedback K_k = B′Π_k at the left end of each interval."""
    return GainSchedule(sol.grid, np.einsum("ji,kjl->kil", p.B, sol.Pi[:-1]))


def riccati_covariance(sol: RiccatiSolution) -> CovariancePath:
    """Σ_k = (Π_k + H_k)⁻¹."""
    Q = sol.Q
    lam = np.linalg.eigvalsh(Q)[:, 0]
    if lam.min() <= 0.0:
        k = int(np.argmin(lam))
        raise SingularCovarianceError(k, lam[k])
    return CovariancePath(sol.grid, symmetrize(np.linalg.inv(Q)))


def sum_dynamics_residual(sol: RiccatiSolution, p: SteeringProblem) -> float:
    """
    Relative residual of Q' = -A′Q - QA + ΠBB′Π - HBB′H for Q = Π + H, with Q' from the
    fourth-order five-point stencil at interior nodes (uniform grids only).
    """
    g = sol.grid
    dt = g.dt
    if g.N < 4:
        raise ValueError("need at least four intervals for the five-point stencil")
    if not np.allclose(dt, dt[0], rtol=1e-9):
        raise ValueError("sum dynamics check needs a uniform grid")
    h = dt[0]
    Q, Pi, H, A, BBt = sol.Q, sol.Pi, sol.H, p.A, p.noise
    dQ = (-Q[4:] + 8.0 * Q[3:-1] - 8.0 * Q[1:-3] + Q[:-4]) / (12.0 * h)
    inner = slice(2, -2)
    terms = (
        -np.einsum("ji,kjl->kil", A, Q[inner]),
        -Q[inner] @ A,
        Pi[inner] @ BBt @ Pi[inner],
        -H[inner] @ BBt @ H[inner],
    )
    rhs = sum(terms)
    scale = max(sum(float(np.abs(t).max()) for t in terms), np.finfo(float).tiny)
    return float(np.abs(dQ - rhs).max() / scale)


def with_grid(sol: RiccatiSolution, p: SteeringProblem, g: TimeGrid) -> RiccatiSolution:
    """Re-integrate a converged solution on another grid from its Π(0)."""
    Pi = integrate_pi_forward(p, g, sol.Pi[0])
    H = integrate_h_forward(p, g, sol.H[0])
    c, chat = _normalizer_curves(p, g, Pi, H)
    residual = float(np.linalg.norm(Pi[-1] + H[-1] - np.linalg.inv(p.SigmaT)))
    return replace(sol, grid=g, Pi=Pi, H=H, c=c, chat=chat, residual=residual)
