import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scalable_rto.optimizer import SolverOptions
from scalable_rto.models import LinearModel, linear_gaussian_problem, toy2d_problem, elliptic_problem
from scalable_rto.problem import BayesProblem, ForwardModel, ScaledIdentity, whiten
from scalable_rto.rto import (
    QrBasis,
    affine_proposals,
    build_qr_basis,
    build_svd_basis,
    draw_reference_noise,
    find_reference,
    generate_proposals,
    golub_kahan_svd,
    map_value,
    proposal_log_density,
    propose_scalable,
    propose_standard,
    reduced_jacobian_action,
    weight_scalable,
    weight_standard,
)
from scalable_rto.rto import _scalable_terms
from scalable_rto.samplers import metropolize


def polar_basis(sb, n):
    """Dense orthonormal basis of range(grad H(v_ref)) built from the SVD factors."""
    Phi, Psi, lam, s = sb.Phi, sb.Psi, sb.Lam, sb.scale
    top = (Phi * s) @ Phi.T + np.eye(n) - Phi @ Phi.T
    bottom = (Psi * (lam * s)) @ Phi.T
    return np.vstack([top, bottom])


def linear_oracle(wp):
    """Whitened posterior N(mean, cov) for an affine G(v) = A v + b."""
    A = wp.jacobian(np.zeros(wp.n))
    b = wp.G(np.zeros(wp.n))
    cov = np.linalg.inv(np.eye(wp.n) + A.T @ A)
    return -cov @ A.T @ b, cov


@pytest.fixture(scope="module")
def toy():
    wp = whiten(toy2d_problem())
    v_ref = find_reference(wp)
    return wp, v_ref, build_qr_basis(wp, v_ref), build_svd_basis(wp, v_ref, 0.0)


def test_reference_is_posterior_mode_for_linear(rng):
    A = rng.standard_normal((3, 5))
    wp = whiten(linear_gaussian_problem(A, rng.standard_normal(3)))
    mean, _ = linear_oracle(wp)
    np.testing.assert_allclose(find_reference(wp), mean, atol=1e-7)


def test_polar_basis_is_a_rotation_of_qr(toy):
    wp, v_ref, qb, sb = toy
    P = polar_basis(sb, 2)
    np.testing.assert_allclose(P.T @ P, np.eye(2), atol=1e-14)
    np.testing.assert_allclose(P @ P.T, qb.Q @ qb.Q.T, atol=1e-13)


def test_weights_differ_by_a_constant_at_full_rank(toy):
    wp, v_ref, qb, sb = toy
    V = np.random.default_rng(5).uniform(-3, 3, (50, 2))
    diff = [weight_standard(wp, qb, v) - weight_scalable(wp, sb, v) for v in V]
    assert np.ptp(diff) <= 1e-8


def test_reduced_determinant_matches_dense(toy):
    wp, v_ref, qb, sb = toy
    P = polar_basis(sb, 2)
    for v in np.random.default_rng(6).uniform(-2, 2, (20, 2)):
        dense = np.linalg.slogdet(P.T @ np.vstack([np.eye(2), wp.jacobian(v)]))[1]
        assert _scalable_terms(wp, sb, v)[4] == pytest.approx(dense, abs=1e-10)


def test_reduced_jacobian_adjoint(toy):
    wp, v_ref, qb, sb = toy
    v = np.array([0.3, -0.2])
    a, b = np.array([0.4, 1.1]), np.array([-0.7, 0.2])
    lhs = reduced_jacobian_action(wp, sb, v, a) @ b
    rhs = a @ reduced_jacobian_action(wp, sb, v, b, adjoint=True)
    assert lhs == pytest.approx(rhs, abs=1e-13)


@pytest.mark.parametrize("ftol", [1e-6, 1e-16])
def test_proposals_invert_the_map(toy, ftol):
    wp, v_ref, qb, sb = toy
    opts = SolverOptions(ftol=ftol)
    bound = np.sqrt(2 * ftol) + 1e-9
    rng = np.random.default_rng(7)
    for _ in range(10):
        xi = rng.standard_normal(2)
        p = propose_scalable(wp, sb, xi, opts)
        assert p.valid
        assert np.linalg.norm(map_value(wp, sb, p.v) - xi) <= bound
        eta = rng.standard_normal(4)
        q = propose_standard(wp, qb, eta, opts)
        assert q.valid
        assert np.linalg.norm(map_value(wp, qb, q.v) - qb.Q.T @ eta) <= bound


def test_rank_zero_proposal_is_the_prior(toy):
    wp, v_ref, qb, sb = toy
    zero = sb.truncate(10.0)
    assert zero.r == 0
    for v in np.random.default_rng(8).uniform(-4, 4, (30, 2)):
        prior = -np.log(2 * np.pi) - 0.5 * v @ v
        assert abs(proposal_log_density(wp, zero, v) - prior) <= 1e-12
    xi = np.array([0.5, -1.5])
    np.testing.assert_array_equal(propose_scalable(wp, zero, xi).v, xi)


@pytest.mark.parametrize("tau", [0.0, 0.55, 10.0])
def test_proposal_density_is_normalised(toy, tau):
    wp, v_ref, qb, sb = toy
    basis = build_svd_basis(wp, v_ref, tau)
    g = np.linspace(-7, 7, 141)
    X, Y = np.meshgrid(g, g)
    q = np.exp([proposal_log_density(wp, basis, v) for v in np.column_stack([X.ravel(), Y.ravel()])])
    assert q.sum() * (g[1] - g[0]) ** 2 == pytest.approx(1.0, abs=1e-3)


def test_log_density_and_weight_sum_to_log_target(toy):
    wp, v_ref, qb, sb = toy
    for basis, w in ((qb, weight_standard), (sb, weight_scalable)):
        v1, v2 = np.array([0.2, 0.9]), np.array([-1.0, 0.4])
        lt = lambda v: -0.5 * v @ v - 0.5 * np.sum(wp.G(v) ** 2)
        d1 = w(wp, basis, v1) + proposal_log_density(wp, basis, v1) - lt(v1)
        d2 = w(wp, basis, v2) + proposal_log_density(wp, basis, v2) - lt(v2)
        assert d1 == pytest.approx(d2, abs=1e-12)


def test_golub_kahan_recovers_dense_svd(rng):
    A = rng.standard_normal((9, 30))
    U, s, V = golub_kahan_svd(lambda x: A @ x, lambda y: A.T @ y, 30, 9)
    np.testing.assert_allclose(s, np.linalg.svd(A, compute_uv=False), rtol=1e-10)
    np.testing.assert_allclose(U @ np.diag(s) @ V.T, A, atol=1e-10)


def test_matrix_free_basis_matches_dense():
    wp = whiten(elliptic_problem(41, 1e-2))
    v_ref = find_reference(wp)
    dense = build_svd_basis(wp, v_ref)
    free = build_svd_basis(wp, v_ref, dense_limit=0)
    np.testing.assert_allclose(free.Lam, dense.Lam, rtol=1e-8)
    np.testing.assert_allclose(np.abs(free.Phi.T @ dense.Phi), np.eye(dense.r), atol=1e-6)


def test_truncation_keeps_values_above_threshold(toy):
    wp, v_ref, qb, sb = toy
    for tau in (0.0, 0.5, 0.55, 1.0):
        t = build_svd_basis(wp, v_ref, tau)
        assert np.all(t.Lam > tau)
        assert t.r == np.sum(sb.Lam > tau)


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=10)
def test_linear_proposals_are_exact(seed):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((2, 3))
    wp = whiten(linear_gaussian_problem(A, rng.standard_normal(2), noise_cov=0.25 * np.eye(2)))
    v_ref = find_reference(wp)
    for basis in (build_qr_basis(wp, v_ref), build_svd_basis(wp, v_ref, 0.0)):
        props = generate_proposals(wp, basis, 200, seed)
        lw = np.array([p.log_weight for p in props])
        assert np.ptp(lw) <= 1e-9
        chain = metropolize(props, v_ref, lw[0], seed)
        assert chain.acceptance_rate == 1.0


def test_affine_path_matches_iterative_solver(rng):
    A = rng.standard_normal((3, 5))
    wp = whiten(linear_gaussian_problem(A, rng.standard_normal(3)))
    v_ref = find_reference(wp)
    for basis, fn in ((build_svd_basis(wp, v_ref, 0.0), propose_scalable), (build_qr_basis(wp, v_ref), propose_standard)):
        noise = draw_reference_noise(3, 20, basis.noise_dim)
        fast = affine_proposals(wp, basis, noise)
        for p, row in zip(fast, noise):
            q = fn(wp, basis, row)
            np.testing.assert_allclose(p.v, q.v, atol=1e-3)
            assert p.log_weight == pytest.approx(q.log_weight, abs=1e-9)


def test_linear_proposal_moments_match_conditioning(rng):
    A = rng.standard_normal((2, 3))
    wp = whiten(linear_gaussian_problem(A, np.array([0.5, -1.0]), noise_cov=0.1 * np.eye(2)))
    mean, cov = linear_oracle(wp)
    v_ref = find_reference(wp)
    props = generate_proposals(wp, build_svd_basis(wp, v_ref), 40000, 11)
    V = np.array([p.v for p in props])
    se = np.sqrt(np.diag(cov) / len(V))
    assert np.all(np.abs(V.mean(0) - mean) <= 4 * se)
    np.testing.assert_allclose(np.cov(V.T), cov, atol=0.03)


def test_worker_count_does_not_change_proposals():
    wp = whiten(elliptic_problem(41, 1e-2))
    v_ref = find_reference(wp)
    basis = build_svd_basis(wp, v_ref)
    one = generate_proposals(wp, basis, 12, 4, workers=1)
    two = generate_proposals(wp, basis, 12, 4, workers=2)
    for a, b in zip(one, two):
        assert a.v.tobytes() == b.v.tobytes()
        assert a.log_weight == b.log_weight


def test_noise_rows_do_not_depend_on_count():
    a = draw_reference_noise(9, 10, 3)
    b = draw_reference_noise(9, 20, 3)
    np.testing.assert_array_equal(a, b[:10])


class _Cliff(ForwardModel):
    """Finite only for |u| < 2."""

    def dims(self):
        return 1, 1

    def eval(self, u):
        return np.where(np.abs(u) < 2, u**3, np.nan)

    def jvp(self, u, du):
        return 3 * u**2 * du

    def vjp(self, u, dy):
        return 3 * u**2 * dy


def test_failed_solves_become_invalid_proposals():
    wp = whiten(BayesProblem(_Cliff(), np.array([0.5]), np.zeros(1), ScaledIdentity(1), ScaledIdentity(1, 0.1)))
    v_ref = find_reference(wp)
    basis = build_svd_basis(wp, v_ref)
    props = [propose_scalable(wp, basis, np.array([x])) for x in (0.0, 40.0)]
    assert props[0].valid
    assert not props[1].valid and props[1].log_weight == -np.inf and props[1].reason
