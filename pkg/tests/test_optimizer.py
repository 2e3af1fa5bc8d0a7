import numpy as np
import pytest
from hypothesis import given, strategies as st

from scalable_rto.optimizer import ResidualProblem, SolverOptions, conjugate_gradient, solve_nlls


def _rosenbrock():
    res = lambda x: np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])
    jac = lambda x: np.array([[-20 * x[0], 10.0], [-1.0, 0.0]])
    return res, jac


@given(st.integers(0, 2**31 - 1), st.integers(1, 12))
def test_cg_solves_spd_systems(seed, n):
    rng = np.random.default_rng(seed)
    B = rng.standard_normal((n, n))
    A = B @ B.T + n * np.eye(n)
    b = rng.standard_normal(n)
    x, r, k = conjugate_gradient(lambda p: A @ p, b, 1e-12, 10 * n)
    np.testing.assert_allclose(x, np.linalg.solve(A, b), rtol=1e-8, atol=1e-10)
    assert k <= 10 * n


def test_rosenbrock_reaches_zero_residual():
    res, jac = _rosenbrock()
    prob = ResidualProblem(res, np.array([-1.2, 1.0]), jvp=lambda x, d: jac(x) @ d, vjp=lambda x, r: jac(x).T @ r)
    rep = solve_nlls(prob, SolverOptions(ftol=1e-20, max_iters=2000, cg_tol=1e-12, zero_residual=True))
    assert rep.converged
    np.testing.assert_allclose(rep.x, [1.0, 1.0], atol=1e-8)


def test_linear_least_squares_matches_lstsq(rng):
    A = rng.standard_normal((12, 5))
    b = rng.standard_normal(12)
    prob = ResidualProblem(lambda x: A @ x - b, np.zeros(5), jvp=lambda x, d: A @ d, vjp=lambda x, r: A.T @ r)
    rep = solve_nlls(prob, SolverOptions(ftol=1e-14, cg_tol=1e-12, gtol=1e-12))
    np.testing.assert_allclose(rep.x, np.linalg.lstsq(A, b, rcond=None)[0], atol=1e-8)


def test_dense_matrix_path_agrees_with_matrix_free():
    res, jac = _rosenbrock()

    class Lin:
        def __init__(self, x):
            self.value = res(x)
            self.matrix = jac(x)
            self.jvp = lambda d: self.matrix @ d
            self.vjp = lambda r: self.matrix.T @ r

    opts = SolverOptions(ftol=1e-20, max_iters=2000, cg_tol=1e-12, zero_residual=True)
    dense = solve_nlls(ResidualProblem(res, np.array([-1.2, 1.0]), linearize=Lin), opts)
    assert dense.dense_solves > 0 and dense.cg_iterations == 0
    np.testing.assert_allclose(dense.x, [1.0, 1.0], atol=1e-8)


@given(st.integers(0, 2**31 - 1))
def test_objective_never_increases(seed):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(3)
    res = lambda x: np.concatenate([x - c, 0.5 * x**3])
    jac = lambda x: np.vstack([np.eye(3), np.diag(1.5 * x**2)])
    prob = ResidualProblem(res, rng.standard_normal(3) * 3, jvp=lambda x, d: jac(x) @ d, vjp=lambda x, r: jac(x).T @ r)
    rep = solve_nlls(prob, SolverOptions(ftol=1e-12))
    hist = np.array(rep.objective_history)
    assert np.all(np.diff(hist) <= 0)
    assert rep.objective == hist[-1]


def test_zero_residual_mode_requires_small_objective():
    # min of 0.5 (x^2 + 1) is 0.5; a zero-residual solve must not report success
    prob = ResidualProblem(lambda x: np.array([x[0], 1.0]), np.array([3.0]), jvp=lambda x, d: np.array([d[0], 0.0]), vjp=lambda x, r: r[:1])
    rep = solve_nlls(prob, SolverOptions(zero_residual=True, max_iters=200))
    assert not rep.converged
    assert rep.objective == pytest.approx(0.5, abs=1e-6)


def test_non_finite_start_is_reported():
    prob = ResidualProblem(lambda x: np.array([np.nan]), np.zeros(1), jvp=lambda x, d: d, vjp=lambda x, r: r)
    rep = solve_nlls(prob)
    assert not rep.converged and "non-finite" in rep.reason


def test_counters_track_evaluations():
    res, jac = _rosenbrock()
    prob = ResidualProblem(res, np.array([-1.2, 1.0]), jvp=lambda x, d: jac(x) @ d, vjp=lambda x, r: jac(x).T @ r)
    rep = solve_nlls(prob, SolverOptions(ftol=1e-16, zero_residual=True, max_iters=2000))
    assert rep.residual_evals == rep.iterations + 1
    assert rep.jvp_evals >= rep.cg_iterations and rep.vjp_evals >= 1


def test_needs_derivatives():
    with pytest.raises(ValueError):
        ResidualProblem(lambda x: x, np.zeros(1))
