"""
Generalized Schrödinger system on tensor grids.

The backward factor φ solves ∂φ/∂t + f·∇φ + ½ a:∇²φ = Vφ and the forward factor φ̂ solves
the formal adjoint with killing. Each time step is a Markov transport matrix P = I + dt·L
(L a generator with zero row sums, reflecting at the mesh edge) combined with the diagonal
decay exp(-dt·V):

    backward  φ_k     = E_k P_k φ_{k+1}
    forward   ρ_{k+1} = P_kᵀ E_k ρ_k

so the two sweeps are exact transposes and ⟨φ_k, φ̂_k⟩ is preserved step by step.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import exprel

from src.config import FORTET_MAX_ITERS, FORTET_TOL, POSITIVITY_FLOOR
from src.core_model import SteeringProblem, TimeGrid
from src.errors import (
    CFLError,
    DiffusionRankError,
    DimensionError,
    GridMismatchError,
    PositivityError,
    PropagationError,
)

logger = logging.getLogger(__name__)

DRIFT_SCHEMES = ("upwind", "fitted")
FIELD_KINDS = ("density", "factor", "potential")


# --- Mesh ---


@dataclass(frozen=True, eq=False)
class Mesh:
    """Uniform tensor grid in one or two dimensions; node values are stored flat in C order."""

    axes: tuple

    def __post_init__(self):
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if not 1 <= len(axes) <= 2:
            raise DimensionError("meshes are one- or two-dimensional")
        for a in axes:
            if a.ndim != 1 or a.size < 3:
                raise DimensionError("each mesh axis needs at least three nodes")
            steps = np.diff(a)
            if np.any(steps <= 0.0) or not np.allclose(steps, steps[0], rtol=1e-9):
                raise ValueError("mesh axes must be uniform and increasing")
            a.setflags(write=False)
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, bounds, nodes) -> "Mesh":
        return cls(tuple(np.linspace(lo, hi, int(k)) for (lo, hi), k in zip(bounds, nodes)))

    @property
    def ndim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple:
        return tuple(a.size for a in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def h(self) -> tuple:
        return tuple(float(a[1] - a[0]) for a in self.axes)

    @property
    def cell_volume(self) -> float:
        return float(np.prod(self.h))

    @property
    def points(self) -> np.ndarray:
        """Node coordinates, shape (size, ndim)."""
        grids = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def neighbor_pairs(self, offset) -> tuple[np.ndarray, np.ndarray]:
        """Flat (source, target) indices of all nodes whose offset neighbour lies on the mesh."""
        idx = np.arange(self.size).reshape(self.shape)
        src, dst = [], []
        for o in offset:
            if o == 1:
                src.append(slice(0, -1))
                dst.append(slice(1, None))
            elif o == -1:
                src.append(slice(1, None))
                dst.append(slice(0, -1))
            else:
                src.append(slice(None))
                dst.append(slice(None))
        return idx[tuple(src)].ravel(), idx[tuple(dst)].ravel()


# --- Fields ---


@dataclass(frozen=True, eq=False)
class Field:
    """Node values over mesh × time (shape (times, size)) or a single snapshot (shape (size,))."""

    mesh: Mesh
    values: np.ndarray
    kind: str = "density"
    grid: TimeGrid | None = None

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown field kind {self.kind!r}")
        values = np.array(self.values, dtype=float)
        if values.shape[-1:] != (self.mesh.size,):
            values = values.reshape(values.shape[: values.ndim - self.mesh.ndim] + (self.mesh.size,))
        if self.grid is not None and (values.ndim != 2 or values.shape[0] != self.grid.N + 1):
            raise DimensionError(f"expected {self.grid.N + 1} time samples, got {values.shape}")
        if self.kind == "density" and np.any(values < 0.0):
            raise ValueError("density fields must be nonnegative")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def is_snapshot(self) -> bool:
        return self.values.ndim == 1

    def at(self, k: int) -> np.ndarray:
        return self.values if self.is_snapshot else self.values[k]

    def on_mesh(self, k: int | None = None) -> np.ndarray:
        v = self.values if k is None and self.is_snapshot else self.at(k)
        return v.reshape(self.mesh.shape)

    @property
    def initial(self) -> np.ndarray:
        return self.at(0)

    @property
    def terminal(self) -> np.ndarray:
        return self.at(-1)


def _vector(mesh: Mesh, data) -> np.ndarray:
    if isinstance(data, Field):
        data = data.at(0) if data.is_snapshot else data.values
    v = np.asarray(data, dtype=float).reshape(-1)
    if v.size != mesh.size:
        raise DimensionError(f"field has {v.size} nodes, mesh has {mesh.size}")
    return v


def mass(mesh: Mesh, data) -> np.ndarray | float:
    """Discrete integral Σ values·cell volume (per time sample for time-resolved fields)."""
    values = data.values if isinstance(data, Field) else np.asarray(data, dtype=float)
    if values.ndim > 1 and values.shape[-1] == mesh.size:
        return values.sum(axis=-1) * mesh.cell_volume
    return float(values.sum() * mesh.cell_volume)


def inner_product(mesh: Mesh, g, h) -> float:
    return float(np.dot(_vector(mesh, g), _vector(mesh, h)) * mesh.cell_volume)


def gaussian_density(mesh: Mesh, cov, mean=None) -> Field:
    """N(mean, cov) sampled at the nodes and renormalized to unit discrete mass."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape != (mesh.ndim, mesh.ndim):
        raise DimensionError(f"covariance must be {mesh.ndim}x{mesh.ndim}")
    mean = np.zeros(mesh.ndim) if mean is None else np.asarray(mean, dtype=float).reshape(-1)
    d = mesh.points - mean
    quad = np.einsum("si,ij,sj->s", d, np.linalg.inv(cov), d)
    rho = np.exp(-0.5 * quad)
    return Field(mesh, rho / (rho.sum() * mesh.cell_volume), "density")


def l2_weighted_error(u: np.ndarray, ref: np.ndarray, weight: np.ndarray) -> float:
    """Relative error ‖u - ref‖ / ‖ref‖ in the L² norm weighted by a density."""
    u, ref, weight = np.asarray(u), np.asarray(ref), np.asarray(weight)
    if u.ndim > weight.ndim:
        weight = weight[..., None]
    num = np.sum(weight * (u - ref) ** 2)
    den = np.sum(weight * ref**2)
    return float(np.sqrt(num / den))


# --- Model ---


def _sample(fn, points: np.ndarray, times: np.ndarray, trailing: tuple) -> np.ndarray:
    size = points.shape[0]
    if not callable(fn):
        value = np.asarray(fn, dtype=float)
        return np.broadcast_to(value, (times.size, size) + trailing).copy()
    return np.stack([np.broadcast_to(np.asarray(fn(points, t), dtype=float), (size,) + trailing) for t in times])


@dataclass(frozen=True, eq=False)
class GridModel:
    """
    Drift f (N+1, size, n), diffusion channel σ (N+1, size, n, m) and killing V (N+1, size)
    sampled at every time node. Interval k uses the samples at t_k.
    """

    mesh: Mesh
    grid: TimeGrid
    f: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    scheme: str = "upwind"

    def __post_init__(self):
        mesh, grid = self.mesh, self.grid
        n = mesh.ndim
        if self.scheme not in DRIFT_SCHEMES:
            raise ValueError(f"unknown drift scheme {self.scheme!r}")
        f = np.asarray(self.f, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        V = np.asarray(self.V, dtype=float)
        T1, size = grid.N + 1, mesh.size
        if f.shape != (T1, size, n):
            raise DimensionError(f"drift samples must have shape {(T1, size, n)}, got {f.shape}")
        if sigma.ndim != 4 or sigma.shape[:3] != (T1, size, n):
            raise DimensionError(f"diffusion samples must have shape (N+1, size, {n}, m), got {sigma.shape}")
        if V.shape != (T1, size):
            raise DimensionError(f"killing samples must have shape {(T1, size)}, got {V.shape}")
        if np.any(V < 0.0):
            raise ValueError("killing rate must be nonnegative")

        ranks = np.linalg.matrix_rank(sigma.reshape(-1, n, sigma.shape[-1]))
        if ranks.min() != ranks.max():
            raise DiffusionRankError(
                f"diffusion rank varies across the mesh ({ranks.min()}..{ranks.max()})"
            )

        for name, arr in (("f", f), ("sigma", sigma), ("V", V)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

        h = min(mesh.h)
        a_norm = float(np.linalg.norm(self.a, ord=2, axis=(-2, -1)).max())
        f_norm = float(np.linalg.norm(f, axis=-1).max())
        limit = min(
            h * h / (2.0 * a_norm) if a_norm > 0.0 else np.inf,
            h / f_norm if f_norm > 0.0 else np.inf,
        )
        dt_max = float(grid.dt.max())
        if dt_max > limit * (1.0 + 1e-12):
            raise CFLError(f"time step {dt_max:.4g} exceeds the mesh CFL bound {limit:.4g}")

    @classmethod
    def from_functions(
        cls,
        mesh: Mesh,
        grid: TimeGrid,
        f,
        sigma,
        V=0.0,
        scheme: str = "upwind",
    ) -> "GridModel":
        """
        Sample coefficients given as constants or callables (points (size, n), t) -> values.
        sigma may be an (n, m) matrix or return (size, n, m).
        """
        pts = mesh.points
        n = mesh.ndim
        if not callable(sigma):
            sig = np.atleast_2d(np.asarray(sigma, dtype=float))
            if sig.shape[0] != n:
                sig = sig.reshape(n, -1)
            m = sig.shape[1]
            sigma = sig
        else:
            m = np.asarray(sigma(pts[:1], float(grid.t[0]))).reshape(1, n, -1).shape[-1]
        return cls(
            mesh=mesh,
            grid=grid,
            f=_sample(f, pts, grid.t, (n,)),
            sigma=_sample(sigma, pts, grid.t, (n, m)),
            V=_sample(V, pts, grid.t, ()),
            scheme=scheme,
        )

    @classmethod
    def from_linear(
        cls,
        problem: SteeringProblem,
        mesh: Mesh,
        grid: TimeGrid,
        killing: str | float = "quadratic",
        scheme: str = "upwind",
    ) -> "GridModel":
        """
        Linear model on the grid: f = Ax, σ = B, and killing ½x′S(t)x ("quadratic"),
        zero ("none") or a constant rate.
        """
        if problem.n != mesh.ndim:
            raise DimensionError(f"problem has n={problem.n}, mesh is {mesh.ndim}-D")
        A = problem.A

        def drift(x, t):
            return x @ A.T

        if killing == "quadratic":

            def V(x, t):
                return 0.5 * np.einsum("si,ij,sj->s", x, problem.S_at(t), x)

        elif killing == "none":
            V = 0.0
        else:
            V = float(killing)
        return cls.from_functions(mesh, grid, drift, problem.B, V, scheme=scheme)

    @property
    def m(self) -> int:
        return self.sigma.shape[-1]

    @property
    def a(self) -> np.ndarray:
        """σσ′ per node and time."""
        return self.sigma @ np.swapaxes(self.sigma, -1, -2)

    @property
    def time_invariant(self) -> bool:
        return all(
            np.array_equal(arr, np.broadcast_to(arr[0], arr.shape)) for arr in (self.f, self.sigma, self.V)
        )


# --- Propagators ---


def _bernoulli(z: np.ndarray) -> np.ndarray:
    """z / (e^z - 1), with the removable singularity at 0."""
    with np.errstate(over="ignore"):
        return 1.0 / exprel(z)


def generator(mesh: Mesh, f: np.ndarray, a: np.ndarray, scheme: str = "upwind"):
    """
    Markov generator of the transport-diffusion operator f·∇ + ½a:∇² on the mesh.
    Returns (L, total_rate) with L in CSR form, off-diagonals >= 0, zero row sums.
    """
    n = mesh.ndim
    size = mesh.size
    up, down = [], []
    for i, h in enumerate(mesh.h):
        D = 0.5 * a[:, i, i]
        fi = f[:, i]
        plain_up = D / h**2 + np.maximum(fi, 0.0) / h
        plain_down = D / h**2 + np.maximum(-fi, 0.0) / h
        if scheme == "fitted":
            diffusive = D > 0.0
            Pe = np.divide(fi * h, D, out=np.zeros_like(fi), where=diffusive)
            up.append(np.where(diffusive, D / h**2 * _bernoulli(-Pe), plain_up))
            down.append(np.where(diffusive, D / h**2 * _bernoulli(Pe), plain_down))
        else:
            up.append(plain_up)
            down.append(plain_down)

    offsets = []
    for i in range(n):
        e = [0] * n
        e[i] = 1
        offsets.append((tuple(e), up[i]))
        e[i] = -1
        offsets.append((tuple(e), down[i]))

    if n == 2:
        c = a[:, 0, 1] / (2.0 * mesh.h[0] * mesh.h[1])
        for i in range(2):
            up[i] -= np.abs(c)
            down[i] -= np.abs(c)
        if min(float(r.min()) for r in up + down) < -1e-12:
            raise CFLError("mixed diffusion too strong for the positive seven-point stencil")
        offsets.extend(
            [
                ((1, 1), np.maximum(c, 0.0)),
                ((-1, -1), np.maximum(c, 0.0)),
                ((1, -1), np.maximum(-c, 0.0)),
                ((-1, 1), np.maximum(-c, 0.0)),
            ]
        )

    rows, cols, data = [], [], []
    for offset, rate in offsets:
        src, dst = mesh.neighbor_pairs(offset)
        r = np.maximum(rate[src], 0.0)
        keep = r > 0.0
        rows.append(src[keep])
        cols.append(dst[keep])
        data.append(r[keep])
    L = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))), shape=(size, size)
    ).tocsr()
    total = np.asarray(L.sum(axis=1)).ravel()
    return (L - sp.diags(total)).tocsr(), total


def _transport(mesh: Mesh, f, a, dt: float, scheme: str) -> sp.csr_matrix:
    L, total = generator(mesh, f, a, scheme)
    worst = dt * float(total.max(initial=0.0))
    if worst >= 1.0:
        raise CFLError(f"step loses positivity (dt·rate = {worst:.3g} >= 1)")
    return (sp.identity(mesh.size, format="csr") + dt * L).tocsr()


@dataclass(frozen=True, eq=False)
class Propagators:
    """Per-interval transport matrices P_k and decay factors exp(-dt_k V_k)."""

    steps: tuple
    decay: np.ndarray  # (N, size)

    @property
    def N(self) -> int:
        return len(self.steps)

    def backward_step(self, k: int, g: np.ndarray) -> np.ndarray:
        return self.decay[k] * (self.steps[k] @ g)

    def forward_step(self, k: int, h: np.ndarray) -> np.ndarray:
        return self.steps[k].T @ (self.decay[k] * h)


def build_propagators(gm: GridModel) -> Propagators:
    """Backward and forward one-step operators for every interval of the model's grid."""
    a = gm.a
    dt = gm.grid.dt
    if gm.time_invariant and np.allclose(dt, dt[0], rtol=1e-12):
        P = _transport(gm.mesh, gm.f[0], a[0], dt[0], gm.scheme)
        steps = (P,) * gm.grid.N
    else:
        steps = tuple(_transport(gm.mesh, gm.f[k], a[k], dt[k], gm.scheme) for k in range(gm.grid.N))
    decay = np.exp(-dt[:, None] * gm.V[:-1])
    return Propagators(steps, decay)


def propagate_forward(gm: GridModel, initial, props: Propagators | None = None, kind: str = "density") -> Field:
    """ρ_{k+1} = P_kᵀ E_k ρ_k from the initial snapshot."""
    props = props or build_propagators(gm)
    out = np.empty((gm.grid.N + 1, gm.mesh.size))
    out[0] = _vector(gm.mesh, initial)
    for k in range(gm.grid.N):
        out[k + 1] = props.forward_step(k, out[k])
        if not np.all(np.isfinite(out[k + 1])):
            raise PropagationError(k)
    return Field(gm.mesh, out, kind, gm.grid)


def propagate_backward(gm: GridModel, terminal, props: Propagators | None = None) -> Field:
    """φ_k = E_k P_k φ_{k+1} from the terminal snapshot."""
    props = props or build_propagators(gm)
    out = np.empty((gm.grid.N + 1, gm.mesh.size))
    out[-1] = _vector(gm.mesh, terminal)
    for k in range(gm.grid.N - 1, -1, -1):
        out[k] = props.backward_step(k, out[k + 1])
        if not np.all(np.isfinite(out[k])):
            raise PropagationError(k)
    return Field(gm.mesh, out, "factor", gm.grid)


# --- Fortet iteration ---


@dataclass(frozen=True, eq=False)
class SchrodingerFactors:
    phi: Field
    phihat: Field
    lam: Field  # -log φ
    iterations: int
    residual: float
    status: str = "converged"
    history: tuple = field(default_factory=tuple)
    monotone: bool = True

    @property
    def converged(self) -> bool:
        return self.status == "converged"


def _check_floor(values: np.ndarray, what: str, offset: int = 0) -> None:
    low = (np.atleast_2d(values) <= POSITIVITY_FLOOR).any(axis=1)
    if low.any():
        k = offset + int(np.argmax(low))
        raise PositivityError(k, f"{what} hit the positivity floor at time index {k}")


def fortet_iterate(
    gm: GridModel,
    rho0,
    rhoT,
    tol: float = FORTET_TOL,
    max_iters: int = FORTET_MAX_ITERS,
    phi_init: float | np.ndarray = 1.0,
) -> SchrodingerFactors:
    """
    Alternate backward and forward sweeps, rescaling φ̂(·,0) = ρ₀/φ(·,0) and φ(·,T) = ρ_T/φ̂(·,T).
    The residual is the relative L¹ mismatch of φφ̂ against ρ_T at t = T (the t = 0 product is
    exact by construction). Non-convergence returns the best iterate with status "iteration-cap".
    """
    mesh = gm.mesh
    rho0 = np.maximum(_vector(mesh, rho0), POSITIVITY_FLOOR)
    rhoT = np.maximum(_vector(mesh, rhoT), POSITIVITY_FLOOR)
    props = build_propagators(gm)
    phiT = np.broadcast_to(np.asarray(phi_init, dtype=float), (mesh.size,)).copy()
    norm_T = float(rhoT.sum())

    history: list[float] = []
    best = None
    status = "iteration-cap"
    for it in range(1, max_iters + 1):
        phi = propagate_backward(gm, phiT, props)
        _check_floor(phi.values, "phi")
        phihat = propagate_forward(gm, rho0 / phi.values[0], props, kind="factor")
        resid = float(np.abs(phi.values[-1] * phihat.values[-1] - rhoT).sum() / norm_T)
        history.append(resid)
        if best is None or resid < best[0]:
            best = (resid, phi, phihat, it)
        logger.debug("Fortet iteration %d: residual %.3e", it, resid)
        if resid <= tol:
            status = "converged"
            break
        _check_floor(phihat.values[-1], "phihat", offset=gm.grid.N)
        phiT = rhoT / phihat.values[-1]

    monotone = bool(np.all(np.diff(history) <= 1e-12 * np.maximum(history[:-1], 1.0)))
    if not monotone:
        logger.warning("Fortet residual was not monotone over %d iterations", len(history))
    if status != "converged":
        logger.warning("Fortet iteration hit the cap (%d); best residual %.3e", max_iters, best[0])
    if status != "converged":
        resid, phi, phihat, _ = best
    lam = Field(mesh, -np.log(phi.values), "potential", gm.grid)
    return SchrodingerFactors(
        phi=phi,
        phihat=phihat,
        lam=lam,
        iterations=len(history),
        residual=resid,
        status=status,
        history=tuple(history),
        monotone=monotone,
    )


def bridge_density(factors: SchrodingerFactors) -> Field:
    """ρ̃ = φφ̂ over all times."""
    return Field(
        factors.phi.mesh,
        factors.phi.values * factors.phihat.values,
        "density",
        factors.phi.grid,
    )


# --- Control ---


def log_gradient(mesh: Mesh, phi: np.ndarray) -> np.ndarray:
    """∇log φ at the nodes by second-order differences, shape (size, ndim)."""
    logphi = np.log(phi).reshape(mesh.shape)
    grads = np.gradient(logphi, *mesh.h, edge_order=2)
    if mesh.ndim == 1:
        grads = [grads]
    return np.stack([g.ravel() for g in grads], axis=-1)


def extract_control(factors: SchrodingerFactors | Field, gm: GridModel) -> np.ndarray:
    """u* = σ′∇log φ per node and time sample, shape (times, size, m)."""
    phi = factors.phi if isinstance(factors, SchrodingerFactors) else factors
    values = phi.values if phi.values.ndim == 2 else phi.values[None]
    if values.shape[0] not in (1, gm.grid.N + 1):
        raise GridMismatchError("factor field and model have different time grids")
    _check_floor(values, "phi")
    out = np.empty((values.shape[0], gm.mesh.size, gm.m))
    for k, v in enumerate(values):
        grad = log_gradient(gm.mesh, v)
        out[k] = np.einsum("sim,si->sm", gm.sigma[k], grad)
    return out


def evolve_controlled(gm: GridModel, rho0, u: np.ndarray, substeps: int | None = None) -> Field:
    """
    Forward Fokker-Planck flow with drift f + σu and no killing. Each interval is split into
    equal substeps; without an explicit count the smallest one keeping every step positive
    and within the advective CFL bound is used.
    """
    mesh, grid = gm.mesh, gm.grid
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        u = u[..., None]
    if u.shape[0] < grid.N or u.shape[1:] != (mesh.size, gm.m):
        raise DimensionError(f"control must have shape (N or N+1, {mesh.size}, {gm.m}), got {u.shape}")
    a = gm.a
    h = min(mesh.h)
    out = np.empty((grid.N + 1, mesh.size))
    out[0] = _vector(mesh, rho0)
    for k, dt in enumerate(grid.dt):
        drift = gm.f[k] + np.einsum("sim,sm->si", gm.sigma[k], u[k])
        L, total = generator(mesh, drift, a[k], gm.scheme)
        f_max = float(np.linalg.norm(drift, axis=-1).max())
        needed = max(
            int(np.floor(dt * float(total.max(initial=0.0)))) + 1,
            int(np.ceil(dt * f_max / h)) if f_max > 0.0 else 1,
        )
        count = needed if substeps is None else int(substeps)
        if count < needed:
            raise CFLError(f"interval {k} needs {needed} substeps for the controlled drift, got {count}")
        P = (sp.identity(mesh.size, format="csr") + (dt / count) * L).T.tocsr()
        rho = out[k]
        for _ in range(count):
            rho = P @ rho
        if not np.all(np.isfinite(rho)):
            raise PropagationError(k)
        out[k + 1] = rho
    return Field(mesh, out, "density", grid)
