"""Tests for grid propagators, the Fortet iteration and control extraction."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core_model import TimeGrid, inertial_problem
from src.errors import (
    CFLError,
    DiffusionRankError,
    DimensionError,
    PositivityError,
    PropagationError,
)
from src.schrodinger_pde import (
    Field,
    GridModel,
    Mesh,
    bridge_density,
    build_propagators,
    evolve_controlled,
    extract_control,
    fortet_iterate,
    gaussian_density,
    inner_product,
    l2_weighted_error,
    log_gradient,
    mass,
    propagate_backward,
    propagate_forward,
)

pytestmark = pytest.mark.pde


def heat_model(v0=0.0, bounds=(-5.0, 5.0), nodes=101, T=0.5, N=200, f=0.0, scheme="upwind"):
    mesh = Mesh.uniform([bounds], [nodes])
    return GridModel.from_functions(mesh, TimeGrid.uniform(T, N), f=f, sigma=1.0, V=v0, scheme=scheme)


def inertial_model(T=0.2, N=20):
    mesh = Mesh.uniform([(-4.0, 4.0), (-4.0, 4.0)], [41, 41])
    return GridModel.from_linear(inertial_problem(), mesh, TimeGrid.uniform(T, N), killing="none")


# --- Mesh / Field ---


def test_mesh_geometry():
    mesh = Mesh.uniform([(-1.0, 1.0), (0.0, 2.0)], [5, 3])
    assert mesh.shape == (5, 3)
    assert mesh.size == 15
    assert mesh.h == pytest.approx((0.5, 1.0))
    assert mesh.cell_volume == pytest.approx(0.5)
    assert mesh.points.shape == (15, 2)
    assert_allclose(mesh.points[1], [-1.0, 1.0])


def test_mesh_rejects_bad_axes():
    with pytest.raises(DimensionError):
        Mesh((np.array([0.0, 1.0]),))
    with pytest.raises(DimensionError):
        Mesh.uniform([(0, 1)] * 3, [4, 4, 4])
    with pytest.raises(ValueError):
        Mesh((np.array([0.0, 0.1, 0.5, 0.6]),))


def test_density_fields_are_nonnegative():
    mesh = Mesh.uniform([(0.0, 1.0)], [4])
    with pytest.raises(ValueError):
        Field(mesh, [0.1, -0.2, 0.3, 0.4])
    assert Field(mesh, [0.1, -0.2, 0.3, 0.4], kind="potential").is_snapshot
    with pytest.raises(ValueError):
        Field(mesh, np.ones(4), kind="velocity")


def test_gaussian_density_has_unit_mass():
    mesh = Mesh.uniform([(-6.0, 6.0), (-6.0, 6.0)], [61, 61])
    rho = gaussian_density(mesh, np.diag([1.0, 0.5]))
    assert mass(mesh, rho) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(DimensionError):
        gaussian_density(mesh, np.eye(3))


def test_l2_weighted_error():
    ref = np.array([1.0, 2.0])
    assert l2_weighted_error(ref, ref, np.ones(2)) == 0.0
    assert l2_weighted_error(1.1 * ref, ref, np.ones(2)) == pytest.approx(0.1)


# --- GridModel checks ---


def test_cfl_bound_enforced_at_construction():
    mesh = Mesh.uniform([(-5.0, 5.0)], [101])
    with pytest.raises(CFLError):
        GridModel.from_functions(mesh, TimeGrid.uniform(1.0, 100), f=0.0, sigma=1.0)


def test_varying_diffusion_rank_rejected():
    mesh = Mesh.uniform([(-1.0, 1.0)], [21])

    def sigma(x, t):
        return (x[:, 0] > 0.0).astype(float)[:, None, None]

    with pytest.raises(DiffusionRankError):
        GridModel.from_functions(mesh, TimeGrid.uniform(0.001, 2), f=0.0, sigma=sigma)


def test_negative_killing_rejected():
    with pytest.raises(ValueError):
        heat_model(v0=-1.0)


def test_time_invariant_model_shares_one_step_matrix():
    props = build_propagators(heat_model())
    assert props.N == 200
    assert props.steps[0] is props.steps[-1]


# --- Operators ---


def test_heat_operator_conserves_mass():
    P = build_propagators(heat_model()).steps[0]
    assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, rtol=1e-14)
    assert_allclose(np.asarray(P.sum(axis=0)).ravel(), 1.0, rtol=1e-14)
    assert P.min() >= 0.0


def test_uniform_killing_row_sums():
    gm = heat_model(v0=0.8)
    props = build_propagators(gm)
    dt = gm.grid.dt[0]
    sums = props.forward_step(0, np.ones(gm.mesh.size))
    assert_allclose(sums, np.exp(-0.8 * dt), rtol=1e-13)
    assert_allclose(sums, 1.0 - 0.8 * dt, atol=(0.8 * dt) ** 2)


def test_degenerate_inertial_operator():
    gm = inertial_model()
    P = build_propagators(gm).steps[0]
    assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, rtol=1e-13)
    assert P.min() >= 0.0

    # nodes at v != 0 jump along x, nodes at v = 0 only diffuse in v
    mesh = gm.mesh
    idx = np.arange(mesh.size).reshape(mesh.shape)
    moving, resting = idx[20, 30], idx[20, 20]
    assert P[moving, idx[21, 30]] > 0.0
    assert P[resting, idx[21, 20]] == 0.0
    assert P[resting, idx[20, 21]] > 0.0


def test_mixed_diffusion_stencil():
    mesh = Mesh.uniform([(-2.0, 2.0), (-2.0, 2.0)], [21, 21])
    grid = TimeGrid.uniform(0.01, 10)
    gm = GridModel.from_functions(mesh, grid, f=0.0, sigma=[[1.0], [1.0]])
    P = build_propagators(gm).steps[0]
    assert_allclose(np.asarray(P.sum(axis=1)).ravel(), 1.0, rtol=1e-13)
    assert P.min() >= 0.0

    strong = GridModel.from_functions(mesh, grid, f=0.0, sigma=[[1.0, 0.0], [2.0, 1.0]])
    with pytest.raises(CFLError):
        build_propagators(strong)


def test_discrete_duality_per_step():
    mesh = Mesh.uniform([(-3.0, 3.0)], [61])
    grid = TimeGrid.uniform(0.1, 40)

    def f(x, t):
        return np.sin(x)

    def V(x, t):
        return 0.5 * x[:, 0] ** 2

    for scheme in ("upwind", "fitted"):
        gm = GridModel.from_functions(mesh, grid, f=f, sigma=0.8, V=V, scheme=scheme)
        props = build_propagators(gm)
        rng = np.random.default_rng(5)
        for k in (0, 17, 39):
            g, h = rng.random(mesh.size), rng.random(mesh.size)
            left = inner_product(mesh, props.backward_step(k, g), h)
            right = inner_product(mesh, g, props.forward_step(k, h))
            assert left == pytest.approx(right, rel=1e-12)


def test_factor_product_constant_in_time():
    gm = inertial_model()
    props = build_propagators(gm)
    rng = np.random.default_rng(11)
    phi = propagate_backward(gm, 0.5 + rng.random(gm.mesh.size), props)
    phihat = propagate_forward(gm, 0.5 + rng.random(gm.mesh.size), props, kind="factor")
    products = np.einsum("ks,ks->k", phi.values, phihat.values)
    assert_allclose(products, products[0], rtol=1e-10)


# --- Propagation ---


def test_constant_killing_mass_decay():
    gm = heat_model(v0=1.5)
    rho = propagate_forward(gm, gaussian_density(gm.mesh, [[0.5]]))
    assert_allclose(mass(gm.mesh, rho), np.exp(-1.5 * gm.grid.t), rtol=1e-10)


def test_null_generator_leaves_field_unchanged():
    mesh = Mesh.uniform([(-1.0, 1.0)], [11])
    gm = GridModel.from_functions(mesh, TimeGrid.uniform(1.0, 5), f=0.0, sigma=0.0)
    rho0 = gaussian_density(mesh, [[0.3]])
    rho = propagate_forward(gm, rho0)
    for k in range(6):
        assert_allclose(rho.at(k), rho0.values)


def test_heat_kernel_variance_growth():
    gm = heat_model(bounds=(-10.0, 10.0), nodes=401, T=1.0, N=1000)
    x = gm.mesh.points[:, 0]
    rho = propagate_forward(gm, gaussian_density(gm.mesh, [[1.0]]))

    def variance(values):
        return float(np.sum(values * x**2) / np.sum(values))

    assert variance(rho.terminal) == pytest.approx(variance(rho.initial) + 1.0, rel=0.02)


def test_backward_constants_are_harmonic():
    gm = heat_model()
    phi = propagate_backward(gm, np.ones(gm.mesh.size))
    assert_allclose(phi.values, 1.0, rtol=1e-12)


def test_backward_constant_killing_decay():
    gm = heat_model(v0=0.7)
    phi = propagate_backward(gm, np.ones(gm.mesh.size))
    expected = np.exp(-0.7 * (gm.grid.T - gm.grid.t))
    assert_allclose(phi.values, np.broadcast_to(expected[:, None], phi.values.shape), rtol=1e-10)


def test_backward_positivity():
    gm = heat_model(v0=0.3, f=lambda x, t: np.cos(3 * x))
    rng = np.random.default_rng(0)
    phi = propagate_backward(gm, 1e-3 + rng.random(gm.mesh.size))
    assert np.all(phi.values > 0.0)


def test_non_finite_values_abort_with_step_index():
    gm = heat_model()
    initial = np.zeros(gm.mesh.size)
    initial[50] = np.inf
    with pytest.raises(PropagationError) as excinfo:
        propagate_forward(gm, initial)
    assert excinfo.value.index == 0


# --- Fortet iteration ---


def gaussian_bridge_model(v0=0.0):
    mesh = Mesh.uniform([(-8.0, 8.0)], [161])
    return GridModel.from_functions(mesh, TimeGrid.uniform(1.0, 400), f=0.0, sigma=1.0, V=v0, scheme="fitted")


def test_prior_target_converges_immediately():
    gm = heat_model()
    rho0 = gaussian_density(gm.mesh, [[1.0]])
    rhoT = propagate_forward(gm, rho0).terminal
    factors = fortet_iterate(gm, rho0, rhoT, tol=1e-10)
    assert factors.converged
    assert factors.iterations == 1
    assert_allclose(factors.phi.values, 1.0)
    assert_allclose(extract_control(factors, gm), 0.0, atol=1e-10)


def test_gaussian_bridge_boundary_products():
    gm = gaussian_bridge_model()
    rho0 = gaussian_density(gm.mesh, [[2.0]])
    rhoT = gaussian_density(gm.mesh, [[0.25]])
    factors = fortet_iterate(gm, rho0, rhoT, tol=1e-8, max_iters=2000)
    assert factors.converged
    assert factors.residual <= 1e-8
    assert isinstance(factors.monotone, bool)
    assert len(factors.history) == factors.iterations
    assert factors.history[-1] < factors.history[0]

    rho = bridge_density(factors)
    assert_allclose(rho.initial, rho0.values, rtol=1e-10, atol=1e-300)
    l1 = np.abs(rho.terminal - rhoT.values).sum() / rhoT.values.sum()
    assert l1 <= 1e-8
    assert_allclose(factors.lam.values, -np.log(factors.phi.values))


def test_initial_guess_scaling_invariance():
    gm = gaussian_bridge_model()
    rho0 = gaussian_density(gm.mesh, [[2.0]])
    rhoT = gaussian_density(gm.mesh, [[0.25]])
    one = bridge_density(fortet_iterate(gm, rho0, rhoT, tol=1e-9, max_iters=2000))
    ten = bridge_density(fortet_iterate(gm, rho0, rhoT, tol=1e-9, max_iters=2000, phi_init=10.0))
    assert_allclose(ten.initial, one.initial, rtol=1e-8, atol=1e-14)
    assert_allclose(ten.terminal, one.terminal, rtol=1e-6, atol=1e-10)


def test_iteration_cap_returns_best_iterate():
    gm = gaussian_bridge_model()
    factors = fortet_iterate(
        gm, gaussian_density(gm.mesh, [[2.0]]), gaussian_density(gm.mesh, [[0.25]]), tol=1e-12, max_iters=2
    )
    assert factors.status == "iteration-cap"
    assert not factors.converged
    assert factors.iterations == 2
    assert factors.residual == min(factors.history)


def test_positivity_floor_breach_is_reported():
    gm = heat_model(v0=1e4, T=0.5, N=200)
    rho = gaussian_density(gm.mesh, [[1.0]])
    with pytest.raises(PositivityError):
        fortet_iterate(gm, rho, rho, max_iters=3)


def test_constant_killing_leaves_control_unchanged():
    controls = []
    for v0 in (0.0, 2.0):
        gm = gaussian_bridge_model(v0)
        rho0 = gaussian_density(gm.mesh, [[2.0]])
        rhoT = gaussian_density(gm.mesh, [[0.25]])
        controls.append(extract_control(fortet_iterate(gm, rho0, rhoT, tol=1e-9, max_iters=2000), gm))
    x = gm.mesh.points[:, 0]
    central = np.abs(x) <= 2.0
    assert np.abs(controls[0][:, central] - controls[1][:, central]).max() <= 1e-6


# --- Control extraction ---


def test_constant_factor_gives_zero_control():
    gm = heat_model()
    u = extract_control(Field(gm.mesh, np.full(gm.mesh.size, 3.0), kind="factor"), gm)
    assert u.shape == (1, gm.mesh.size, 1)
    assert_allclose(u, 0.0, atol=1e-12)


def test_gaussian_factor_gives_linear_control():
    gm = heat_model()
    x = gm.mesh.points[:, 0]
    u = extract_control(Field(gm.mesh, np.exp(-0.5 * x**2), kind="factor"), gm)
    assert_allclose(u[0, :, 0], -x, atol=1e-9)


def test_log_gradient_is_second_order():
    def error(nodes):
        mesh = Mesh.uniform([(-2.0, 2.0)], [nodes])
        x = mesh.points[:, 0]
        grad = log_gradient(mesh, np.exp(x**3 / 3.0 - x))[:, 0]
        return np.abs(grad - (x**2 - 1.0)).max()

    e = [error(k) for k in (21, 41, 81)]
    assert np.log2(e[0] / e[1]) >= 1.8
    assert np.log2(e[1] / e[2]) >= 1.8


def test_control_needs_positive_factor():
    gm = heat_model()
    phi = np.ones(gm.mesh.size)
    phi[3] = 0.0
    with pytest.raises(PositivityError):
        extract_control(Field(gm.mesh, phi, kind="factor"), gm)


# --- Controlled evolution ---


def test_zero_control_reduces_to_prior():
    gm = heat_model()
    rho0 = gaussian_density(gm.mesh, [[0.5]])
    u = np.zeros((gm.grid.N + 1, gm.mesh.size, 1))
    controlled = evolve_controlled(gm, rho0, u)
    assert_allclose(controlled.values, propagate_forward(gm, rho0).values, rtol=1e-12, atol=1e-300)


def test_controlled_flow_conserves_mass():
    gm = heat_model(v0=1.0)
    x = gm.mesh.points[:, 0]
    u = np.broadcast_to(-2.0 * x[None, :, None], (gm.grid.N + 1, gm.mesh.size, 1))
    rho = evolve_controlled(gm, gaussian_density(gm.mesh, [[1.0]]), u)
    assert_allclose(mass(gm.mesh, rho), 1.0, atol=1e-8)


def test_too_few_substeps_rejected():
    gm = heat_model()
    u = np.full((gm.grid.N + 1, gm.mesh.size, 1), 50.0)
    with pytest.raises(CFLError):
        evolve_controlled(gm, gaussian_density(gm.mesh, [[1.0]]), u, substeps=1)
    with pytest.raises(DimensionError):
        evolve_controlled(gm, gaussian_density(gm.mesh, [[1.0]]), np.zeros((gm.grid.N, 3, 1)))
