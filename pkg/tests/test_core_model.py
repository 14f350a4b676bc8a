"""Unit tests for the problem data model, well-posedness checks and reference quantities."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.core_model import (
    CovariancePath,
    GainSchedule,
    SteeringProblem,
    TimeGrid,
    controllability_matrix,
    cost_functional,
    inertial_problem,
    propagate_covariance,
    uncontrolled_covariance,
    validate_problem,
)
from src.errors import DimensionError, GridMismatchError, SymmetryError


def scalar_problem(Sigma0=1.0, SigmaT=1.0, T=1.0, A=0.0, B=1.0, S=None):
    return SteeringProblem.constant(
        A=[[A]], B=[[B]], Sigma0=[[Sigma0]], SigmaT=[[SigmaT]], T=T, S=S
    )


# --- TimeGrid / GainSchedule / CovariancePath ---


def test_uniform_grid_spans_horizon():
    grid = TimeGrid.uniform(1.3, 7)
    assert grid.N == 7
    assert grid.t[0] == 0.0
    assert grid.T == 1.3
    assert grid.dt.sum() == pytest.approx(1.3, rel=1e-12)
    assert np.all(grid.dt > 0)


def test_grid_rejects_bad_instants():
    with pytest.raises(ValueError):
        TimeGrid([0.0, 0.5, 0.5, 1.0])
    with pytest.raises(ValueError):
        TimeGrid([0.1, 0.5])
    with pytest.raises(ValueError):
        TimeGrid.uniform(1.0, 0)


def test_grid_arrays_are_read_only():
    grid = TimeGrid.uniform(1.0, 4)
    with pytest.raises(ValueError):
        grid.t[1] = 0.3


def test_interval_index_is_piecewise_constant():
    grid = TimeGrid.uniform(1.0, 4)
    assert grid.interval_index(0.0) == 0
    assert grid.interval_index(0.26) == 1
    assert grid.interval_index(0.25) == 1
    assert grid.interval_index(1.0) == 3


def test_gain_schedule_shape_and_lookup():
    grid = TimeGrid.uniform(1.0, 4)
    K = np.arange(8, dtype=float).reshape(4, 1, 2)
    gains = GainSchedule(grid, K)
    assert (gains.m, gains.n) == (1, 2)
    assert_allclose(gains.at(0.6), [[4.0, 5.0]])

    with pytest.raises(DimensionError):
        GainSchedule(grid, np.zeros((5, 1, 2)))
    with pytest.raises(ValueError):
        GainSchedule(grid, np.full((4, 1, 2), np.nan))


def test_gain_schedule_accepts_flat_rows():
    grid = TimeGrid.uniform(1.0, 3)
    gains = GainSchedule(grid, np.ones((3, 2)))
    assert gains.K.shape == (3, 1, 2)


def test_covariance_path_rejects_asymmetric_samples():
    grid = TimeGrid.uniform(1.0, 1)
    Sigma = np.array([np.eye(2), [[1.0, 1e-6], [0.0, 1.0]]])
    with pytest.raises(SymmetryError):
        CovariancePath(grid, Sigma)


def test_covariance_path_rejects_indefinite_samples():
    grid = TimeGrid.uniform(1.0, 1)
    with pytest.raises(ValueError):
        CovariancePath(grid, np.array([np.eye(2), np.diag([1.0, -1e-3])]))


# --- validate_problem ---


def test_reference_problem_is_well_posed():
    report = validate_problem(inertial_problem(1.0))
    assert report.passed
    assert report.controllability_rank == 2
    names = {c.name for c in report.checks}
    assert {"spd_sigma0", "spd_sigmaT", "psd_S", "controllability_rank"} <= names


def test_uncontrollable_drift_fails_rank_check():
    p = SteeringProblem.constant(
        A=np.zeros((2, 2)), B=[[0.0], [1.0]], Sigma0=2 * np.eye(2), SigmaT=0.25 * np.eye(2), T=1.0
    )
    report = validate_problem(p)
    assert report.controllability_rank == 1
    assert not report["controllability_rank"].passed
    assert not report.passed


def test_singular_target_fails_spd_check():
    p = SteeringProblem.constant(
        A=[[0.0, 1.0], [0.0, 0.0]], B=[[0.0], [1.0]], Sigma0=2 * np.eye(2), SigmaT=np.diag([1.0, 0.0]), T=1.0
    )
    report = validate_problem(p)
    check = report["spd_sigmaT"]
    assert not check.passed
    assert check.margin == pytest.approx(0.0, abs=1e-12)
    assert report["spd_sigma0"].passed


def test_negative_loss_weight_fails_psd_check():
    p = inertial_problem().with_S(-0.1)
    assert not validate_problem(p)["psd_S"].passed


def test_time_varying_loss_weight_checked_on_every_sample():
    def S(t):
        return np.eye(2) * (1.0 - 2.0 * t)

    p = inertial_problem().with_S(S)
    grid = TimeGrid.uniform(1.0, 10)
    check = validate_problem(p, grid)["psd_S"]
    assert not check.passed
    assert check.margin == pytest.approx(-1.0)


def test_dimension_mismatch_is_structural():
    p = SteeringProblem(
        A=[[0.0, 1.0], [0.0, 0.0]],
        B=[[0.0], [1.0]],
        S=np.eye(2),
        Sigma0=2 * np.eye(3),
        SigmaT=0.25 * np.eye(2),
        T=1.0,
    )
    with pytest.raises(DimensionError):
        validate_problem(p)


def test_validation_is_deterministic():
    p = inertial_problem(10.0)
    assert validate_problem(p).as_dict() == validate_problem(p).as_dict()


def test_controllability_matrix_of_double_integrator():
    C = controllability_matrix(np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[0.0], [1.0]]))
    assert_allclose(C, [[0.0, 1.0], [1.0, 0.0]])


# --- uncontrolled_covariance ---


def test_double_integrator_covariance_matches_closed_form():
    p = inertial_problem()
    path = uncontrolled_covariance(p, TimeGrid.uniform(1.0, 100))
    assert_allclose(path.Sigma[-1], [[13 / 3, 5 / 2], [5 / 2, 3.0]], rtol=1e-12)
    t = path.grid.t[37]
    closed = 2 * np.array([[1 + t**2, t], [t, 1.0]]) + np.array([[t**3 / 3, t**2 / 2], [t**2 / 2, t]])
    assert_allclose(path.Sigma[37], closed, rtol=1e-12)


def test_pure_diffusion_variance_grows_linearly():
    path = uncontrolled_covariance(scalar_problem(T=2.0), TimeGrid.uniform(2.0, 20))
    assert path.Sigma[-1, 0, 0] == pytest.approx(3.0, rel=1e-12)


def test_frozen_dynamics_keep_covariance():
    Sigma = np.array([[2.0, 0.3], [0.3, 1.0]])
    p = SteeringProblem.constant(A=np.zeros((2, 2)), B=np.zeros((2, 1)), Sigma0=Sigma, SigmaT=Sigma, T=1.0)
    path = uncontrolled_covariance(p, TimeGrid.uniform(1.0, 10))
    for S in path.Sigma:
        assert_allclose(S, Sigma)


def test_lyapunov_residual_is_first_order():
    p = inertial_problem()

    def residual(N):
        path = uncontrolled_covariance(p, TimeGrid.uniform(1.0, N))
        S, h = path.Sigma, 1.0 / N
        rhs = p.A @ S[:-1] + S[:-1] @ p.A.T + p.noise
        return np.linalg.norm((S[1:] - S[:-1]) / h - rhs, axis=(1, 2)).max()

    r = [residual(N) for N in (20, 40, 80)]
    assert np.log2(r[0] / r[1]) >= 0.9
    assert np.log2(r[1] / r[2]) >= 0.9


def test_closed_loop_euler_scheme_matches_manual_step():
    p = inertial_problem()
    grid = TimeGrid.uniform(1.0, 5)
    K = np.tile([[0.5, 1.0]], (5, 1, 1))
    path = propagate_covariance(p, GainSchedule(grid, K), scheme="euler")
    Acl = p.A - p.B @ K[0]
    expected = p.Sigma0 + 0.2 * (Acl @ p.Sigma0 + p.Sigma0 @ Acl.T + p.noise)
    assert_allclose(path.Sigma[1], expected, rtol=1e-14)


def test_propagation_rejects_mismatched_grid():
    p = inertial_problem()
    gains = GainSchedule.zeros(TimeGrid.uniform(1.0, 5), 1, 2)
    with pytest.raises(GridMismatchError):
        propagate_covariance(p, gains, TimeGrid.uniform(1.0, 6))


# --- cost_functional ---


def test_uncontrolled_cost_of_double_integrator():
    p = inertial_problem(1.0)
    grid = TimeGrid.uniform(1.0, 1000)
    J = cost_functional(p, GainSchedule.zeros(grid, 1, 2), uncontrolled_covariance(p, grid))
    assert J == pytest.approx(2.625, abs=2e-3)


def test_cost_vanishes_without_control_or_penalty():
    p = inertial_problem(0.0)
    grid = TimeGrid.uniform(1.0, 50)
    assert cost_functional(p, GainSchedule.zeros(grid, 1, 2), uncontrolled_covariance(p, grid)) == 0.0


def test_constant_integrand_cost():
    p = scalar_problem()
    grid = TimeGrid.uniform(1.0, 8)
    path = CovariancePath(grid, np.ones((9, 1, 1)))
    gains = GainSchedule(grid, np.ones((8, 1, 1)))
    assert cost_functional(p, gains, path) == pytest.approx(0.5, rel=1e-14)


def test_cost_rejects_grid_mismatch():
    p = scalar_problem()
    g1, g2 = TimeGrid.uniform(1.0, 4), TimeGrid.uniform(1.0, 5)
    with pytest.raises(GridMismatchError):
        cost_functional(p, GainSchedule.zeros(g1, 1, 1), uncontrolled_covariance(p, g2))


def test_cost_converges_under_refinement():
    p = inertial_problem(1.0)

    def J(N):
        grid = TimeGrid.uniform(1.0, N)
        return cost_functional(p, GainSchedule.zeros(grid, 1, 2), uncontrolled_covariance(p, grid))

    j50, j100, j200 = J(50), J(100), J(200)
    assert abs(j200 - j100) < 2 * abs(j100 - j50)
