"""Randomize-then-optimize proposals.

Two constructions of the same proposal map are provided:

* the dense path, with ``Q`` an orthonormal basis of ``range(grad H(v_ref))``
  from a thin QR factorisation; costs grow like ``n^2`` per objective
  evaluation and ``n^3`` per weight;
* the subspace path, which only stores the SVD ``grad G(v_ref) = Psi Lam Phi^T``
  and solves an ``r``-dimensional problem per proposal; costs grow like the
  forward model.  Truncating small singular values shrinks ``r`` further.

All weights are returned as logs.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .optimizer import ResidualProblem, SolveReport, SolverOptions, _solve, solve_nlls
from .problem import NonFiniteOutputError, WhitenedProblem

__all__ = [
    "ReferenceError_",
    "QrBasis",
    "SvdBasis",
    "Proposal",
    "find_reference",
    "find_reference_report",
    "build_qr_basis",
    "build_svd_basis",
    "golub_kahan_svd",
    "propose_standard",
    "weight_standard",
    "propose_scalable",
    "weight_scalable",
    "reduced_jacobian_action",
    "proposal_log_density",
    "map_value",
    "generate_proposals",
    "affine_proposals",
    "draw_reference_noise",
]

DEFAULT_TAU = 1e-2
DENSE_SVD_LIMIT = 2048


class ReferenceError_(RuntimeError):
    """The linearisation point could not be found."""


class BasisError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class QrBasis:
    Q: np.ndarray
    v_ref: np.ndarray

    @property
    def n(self):
        return self.Q.shape[1]

    @property
    def noise_dim(self):
        return self.Q.shape[0]


@dataclass(frozen=True)
class SvdBasis:
    Psi: np.ndarray
    Lam: np.ndarray
    Phi: np.ndarray
    tau: float
    v_ref: np.ndarray
    scale: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        # diagonal of (Lam^2 + I)^{-1/2}
        object.__setattr__(self, "scale", 1.0 / np.sqrt(self.Lam**2 + 1.0))

    @property
    def r(self):
        return self.Lam.size

    @property
    def n(self):
        return self.Phi.shape[0]

    @property
    def noise_dim(self):
        return self.Phi.shape[0]

    def truncate(self, tau):
        keep = self.Lam > tau
        return SvdBasis(self.Psi[:, keep], self.Lam[keep], self.Phi[:, keep], float(tau), self.v_ref)


@dataclass
class Proposal:
    v: np.ndarray
    log_weight: float
    valid: bool
    report: Optional[SolveReport] = None
    noise: Optional[np.ndarray] = None
    # forward evaluations and Jacobian actions spent on the weight
    weight_evals: int = 0
    weight_actions: int = 0
    seconds: float = 0.0
    reason: str = ""


# ---------------------------------------------------------------------------
# reference point and bases
# ---------------------------------------------------------------------------


class _HLinearization:
    __slots__ = ("value", "jvp", "vjp")

    def __init__(self, wp, v):
        lin = wp.linearize(v)
        n = wp.n
        self.value = np.concatenate([v, lin.value])
        self.jvp = lambda dv: np.concatenate([dv, lin.jvp(dv)])
        self.vjp = lambda dr: dr[:n] + lin.vjp(dr[n:])


def find_reference_report(wp: WhitenedProblem, opts: Optional[SolverOptions] = None, x0=None):
    """Posterior mode ``argmin 0.5 ||H(v)||^2`` started from the prior mean,
    together with the solver report."""
    if opts is None:
        opts = SolverOptions(ftol=1e-10, max_iters=5000, gtol=1e-7)
    x0 = np.zeros(wp.n) if x0 is None else np.asarray(x0, dtype=float)
    prob = ResidualProblem(
        residual=lambda v: _HLinearization(wp, v).value,
        x0=x0,
        linearize=lambda v: _HLinearization(wp, v),
    )
    rep = solve_nlls(prob, opts)
    if not rep.converged:
        raise ReferenceError_(f"reference point search failed: {rep.reason}")
    return rep.x, rep


def find_reference(wp: WhitenedProblem, opts: Optional[SolverOptions] = None, x0=None) -> np.ndarray:
    return find_reference_report(wp, opts, x0)[0]


def build_qr_basis(wp: WhitenedProblem, v_ref) -> QrBasis:
    """Thin QR of the dense ``(n+m) x n`` matrix ``grad H(v_ref)``."""
    v_ref = np.asarray(v_ref, dtype=float)
    JH = np.vstack([np.eye(wp.n), wp.jacobian(v_ref)])
    Q, R = np.linalg.qr(JH, mode="reduced")
    d = np.abs(np.diag(R))
    if d.min() <= 1e-12 * d.max():
        raise BasisError("grad H(v_ref) is rank deficient")
    return QrBasis(Q, v_ref)


def golub_kahan_svd(jvp, vjp, n, m, k=None, seed=0):
    """Truncated SVD of an ``m x n`` operator from Golub-Kahan bidiagonalisation.

    Full reorthogonalisation against all previous Lanczos vectors; ``k``
    steps (default ``min(m, n)``, which recovers the whole spectrum).
    Returns ``(U, s, V)`` with ``A ~= U diag(s) V^T``.
    """
    k = min(m, n) if k is None else min(k, m, n)
    U = np.zeros((m, k))
    V = np.zeros((n, k))
    alpha = np.zeros(k)
    beta = np.zeros(k)
    rng = np.random.default_rng(seed)
    # when m < n start in the row space, so min(m, n) steps span all of it
    v = vjp(rng.standard_normal(m)) if m < n else rng.standard_normal(n)
    v /= np.linalg.norm(v)
    u_prev = np.zeros(m)
    b = 0.0
    steps = 0
    for j in range(k):
        V[:, j] = v
        u = jvp(v) - b * u_prev
        u -= U[:, :j] @ (U[:, :j].T @ u)
        a = np.linalg.norm(u)
        if a <= 1e-14:
            break
        u /= a
        U[:, j] = u
        alpha[j] = a
        steps = j + 1
        v_next = vjp(u) - a * v
        v_next -= V[:, : j + 1] @ (V[:, : j + 1].T @ v_next)
        b = np.linalg.norm(v_next)
        beta[j] = b
        if b <= 1e-14 or j == k - 1:
            break
        v = v_next / b
        u_prev = u
    B = np.diag(alpha[:steps]) + np.diag(beta[: steps - 1], 1)
    P, s, WT = np.linalg.svd(B)
    return U[:, :steps] @ P, s, V[:, :steps] @ WT.T


def build_svd_basis(wp: WhitenedProblem, v_ref, tau: float = DEFAULT_TAU, dense_limit: int = DENSE_SVD_LIMIT) -> SvdBasis:
    """SVD of ``grad G(v_ref)`` keeping singular values strictly above ``tau``.

    Small problems assemble the Jacobian densely; larger ones use matrix-free
    bidiagonalisation.  ``tau = 0`` keeps the full numerical rank.
    """
    v_ref = np.asarray(v_ref, dtype=float)
    n, m = wp.n, wp.m
    try:
        if n <= dense_limit:
            Psi, lam, PhiT = np.linalg.svd(wp.jacobian(v_ref), full_matrices=False)
            Phi = PhiT.T
        else:
            lin = wp.linearize(v_ref)
            Psi, lam, Phi = golub_kahan_svd(lin.jvp, lin.vjp, n, m)
    except np.linalg.LinAlgError as exc:
        raise BasisError(f"SVD failed: {exc}") from exc
    if lam.size:
        floor = np.finfo(float).eps * max(n, m) * lam[0]
    else:
        floor = 0.0
    keep = lam > max(tau, floor)
    return SvdBasis(Psi[:, keep].copy(), lam[keep].copy(), Phi[:, keep].copy(), float(tau), v_ref)


# ---------------------------------------------------------------------------
# dense path
# ---------------------------------------------------------------------------


def _logabsdet(M):
    if M.size == 0:
        return 0.0
    sign, logdet = np.linalg.slogdet(M)
    return -np.inf if sign == 0 else float(logdet)


def weight_standard(wp: WhitenedProblem, basis: QrBasis, v, lin=None, M=None) -> float:
    """``log w(v) = -log|det(Q^T grad H(v))| - 0.5 ||H(v)||^2 + 0.5 ||Q^T H(v)||^2``.

    ``lin`` may carry an existing linearization of ``G`` at ``v`` and ``M``
    the matrix ``Q^T grad H(v)``.
    """
    v = np.asarray(v, dtype=float)
    n = wp.n
    if lin is None:
        lin = wp.linearize(v)
    G = lin.value
    Qt, Qb = basis.Q[:n], basis.Q[n:]
    QtH = Qt.T @ v + Qb.T @ G
    if M is None:
        M = Qt.T + Qb.T @ np.asarray(lin.vjp(np.eye(wp.m))).T
    return -_logabsdet(M) - 0.5 * (v @ v) - 0.5 * (G @ G) + 0.5 * (QtH @ QtH)


class _StandardSystem:
    """Residual ``Q^T (H(v) - eta)`` with its dense ``n x n`` Jacobian."""

    __slots__ = ("value", "jvp", "vjp", "lin", "matrix", "batched")

    def __init__(self, wp, Qt, Qb, target, v):
        self.lin = lin = wp.linearize(v)
        self.batched = (0, wp.m)
        self.value = Qt.T @ v + Qb.T @ lin.value - target
        JG = np.asarray(lin.vjp(np.eye(wp.m))).T
        self.matrix = M = Qt.T + Qb.T @ JG
        self.jvp = lambda dv: M @ dv
        self.vjp = lambda dr: M.T @ dr


def propose_standard(wp: WhitenedProblem, basis: QrBasis, eta, opts: SolverOptions = SolverOptions()) -> Proposal:
    """Solve ``Q^T H(v) = Q^T eta`` starting from ``v_ref``."""
    t0 = time.process_time()
    eta = np.asarray(eta, dtype=float)
    n = wp.n
    Qt, Qb = basis.Q[:n], basis.Q[n:]
    target = basis.Q.T @ eta
    prob = ResidualProblem(
        residual=lambda v: _StandardSystem(wp, Qt, Qb, target, v).value,
        x0=basis.v_ref,
        linearize=lambda v: _StandardSystem(wp, Qt, Qb, target, v),
    )
    prop = _finish(prob, _zero_residual(opts), eta, lambda v, st: weight_standard(wp, basis, v, st.lin, st.matrix), wp.m)
    prop.seconds = time.process_time() - t0
    return prop


def _zero_residual(opts):
    return opts if opts.zero_residual else replace(opts, zero_residual=True)


def _finish(prob, opts, noise, weight_fn, actions, lift=None):
    """Solve, then weigh the solution reusing the solver's last linearization."""
    rep, state = _solve(prob, opts)
    v = rep.x if lift is None else lift(rep.x)
    prop = Proposal(v=v, log_weight=-np.inf, valid=False, report=rep, noise=noise)
    if not rep.converged:
        prop.reason = rep.reason
        return prop
    return _weigh(prop, weight_fn, actions, state)


def _weigh(prop, weight_fn, actions, state=None):
    try:
        lw = weight_fn(prop.v, state)
    except (NonFiniteOutputError, FloatingPointError, np.linalg.LinAlgError) as exc:
        prop.reason = f"weight failed: {exc}"
        return prop
    prop.weight_evals = 1 if state is None else 0
    # an assembled system matrix already holds the determinant's actions
    assembled = getattr(state, "matrix", None) is not None or getattr(state, "inner", None) is not None
    prop.weight_actions = 0 if assembled else actions
    if np.isfinite(lw):
        prop.log_weight = float(lw)
        prop.valid = True
    else:
        prop.reason = "singular determinant"
    return prop


# ---------------------------------------------------------------------------
# subspace path
# ---------------------------------------------------------------------------


# reduced systems up to this size are assembled densely from ``r`` batched
# actions; larger ones stay matrix-free.  Either way the solver takes inexact
# CG steps on them, so iteration counts do not depend on this choice.
DENSE_REDUCED_MAX = 64


class _ReducedSystem:
    """``(Lam^2+I)^{-1/2} (v_r + Lam Psi^T G(v_perp + Phi v_r)) - Phi^T xi``.

    ``inner`` is ``I + Lam Psi^T grad G Phi`` when assembled, so the weight
    can reuse it for the determinant.
    """

    __slots__ = ("value", "jvp", "vjp", "lin", "inner", "batched")

    def __init__(self, wp, basis, v_perp, xi_r, vr):
        s, lam, Psi, Phi = basis.scale, basis.Lam, basis.Psi, basis.Phi
        self.lin = lin = wp.linearize(v_perp + Phi @ vr)
        self.value = s * (vr + lam * (Psi.T @ lin.value)) - xi_r
        if basis.r <= DENSE_REDUCED_MAX:
            K = lam[:, None] * (Psi.T @ lin.jvp(Phi))
            K.flat[:: basis.r + 1] += 1.0
            self.inner = K
            self.batched = (basis.r, 0)
            M = s[:, None] * K
            self.jvp = lambda d: M @ d
            self.vjp = lambda d: M.T @ d
        else:
            self.inner = None
            self.batched = (0, 0)
            self.jvp = lambda d: s * (d + lam * (Psi.T @ lin.jvp(Phi @ d)))
            self.vjp = lambda d: s * d + Phi.T @ lin.vjp(Psi @ (lam * s * d))


def propose_scalable(wp: WhitenedProblem, basis: SvdBasis, xi, opts: SolverOptions = SolverOptions()) -> Proposal:
    """Split ``v = v_perp + Phi v_r``: ``v_perp`` is the complement part of
    ``xi``; ``v_r`` solves the ``r``-dimensional system."""
    t0 = time.process_time()
    xi = np.asarray(xi, dtype=float)
    Phi = basis.Phi
    if basis.r == 0:
        prop = Proposal(v=xi.copy(), log_weight=-np.inf, valid=False, noise=xi)
        prop = _weigh(prop, lambda v, st: weight_scalable(wp, basis, v), 0)
        prop.seconds = time.process_time() - t0
        return prop
    xi_r = Phi.T @ xi
    v_perp = xi - Phi @ xi_r
    prob = ResidualProblem(
        residual=lambda vr: _ReducedSystem(wp, basis, v_perp, xi_r, vr).value,
        x0=Phi.T @ basis.v_ref,
        linearize=lambda vr: _ReducedSystem(wp, basis, v_perp, xi_r, vr),
    )
    prop = _finish(
        prob,
        _zero_residual(opts),
        xi,
        lambda v, st: weight_scalable(wp, basis, v, st.lin, st.inner),
        basis.r,
        lift=lambda vr: v_perp + Phi @ vr,
    )
    prop.seconds = time.process_time() - t0
    return prop


def _scalable_terms(wp, basis, v, lin=None, inner=None):
    v = np.asarray(v, dtype=float)
    if lin is None:
        lin = wp.linearize(v)
    G = lin.value
    s, lam, Psi, Phi = basis.scale, basis.Lam, basis.Psi, basis.Phi
    vr = Phi.T @ v
    t = s * (vr + lam * (Psi.T @ G))
    if basis.r:
        if inner is None:
            inner = np.eye(basis.r) + lam[:, None] * (Psi.T @ lin.jvp(Phi))
        logdet = float(np.sum(np.log(s))) + _logabsdet(inner)
    else:
        logdet = 0.0
    return v, G, vr, t, logdet


def weight_scalable(wp: WhitenedProblem, basis: SvdBasis, v, lin=None, inner=None) -> float:
    """Log weight from the SVD factors; the determinant is reduced to ``r x r``.

    ``lin`` and ``inner`` (the matrix ``I + Lam Psi^T grad G(v) Phi``) may be
    passed to reuse work already done at ``v``.
    """
    v, G, vr, t, logdet = _scalable_terms(wp, basis, v, lin, inner)
    return -logdet - 0.5 * (G @ G) - 0.5 * (vr @ vr) + 0.5 * (t @ t)


def reduced_jacobian_action(wp: WhitenedProblem, basis: SvdBasis, v, dvr, adjoint: bool = False):
    """``(Lam^2+I)^{-1/2} (I + Lam Psi^T grad G(v) Phi)`` applied to ``dvr``
    (or its transpose when ``adjoint``)."""
    lin = wp.linearize(np.asarray(v, dtype=float))
    s, lam, Psi, Phi = basis.scale, basis.Lam, basis.Psi, basis.Phi
    dvr = np.asarray(dvr, dtype=float)
    if adjoint:
        return s * dvr + Phi.T @ lin.vjp(Psi @ (lam * s * dvr))
    return s * (dvr + lam * (Psi.T @ lin.jvp(Phi @ dvr)))


def map_value(wp: WhitenedProblem, basis, v):
    """The transport map ``S(v)`` whose inverse generates proposals."""
    v = np.asarray(v, dtype=float)
    if isinstance(basis, QrBasis):
        return basis.Q.T @ np.concatenate([v, wp.G(v)])
    Phi = basis.Phi
    vr = Phi.T @ v
    t = basis.scale * (vr + basis.Lam * (basis.Psi.T @ wp.G(v)))
    return Phi @ t + (v - Phi @ vr)


def proposal_log_density(wp: WhitenedProblem, basis, v) -> float:
    """Normalised log density of the RTO proposal at ``v``."""
    n = wp.n
    if isinstance(basis, QrBasis):
        v = np.asarray(v, dtype=float)
        lin = wp.linearize(v)
        Qt, Qb = basis.Q[:n], basis.Q[n:]
        S = Qt.T @ v + Qb.T @ lin.value
        M = Qt.T + Qb.T @ np.asarray(lin.vjp(np.eye(wp.m))).T
        logdet = _logabsdet(M)
        sq = S @ S
    else:
        v, G, vr, t, logdet = _scalable_terms(wp, basis, v)
        perp = v - basis.Phi @ vr
        sq = t @ t + perp @ perp
    return -0.5 * n * np.log(2 * np.pi) + logdet - 0.5 * sq


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


def draw_reference_noise(seed, n_samples, dim):
    """Reference Gaussians, one row per proposal index.

    Drawn in index order from a dedicated stream, so the rows do not depend
    on how proposals are later split across workers.
    """
    ss = np.random.SeedSequence(seed)
    noise_seq = ss.spawn(2)[0]
    return np.random.default_rng(noise_seq).standard_normal((n_samples, dim))


def _propose_chunk(args):
    wp, basis, rows, opts = args
    fn = propose_standard if isinstance(basis, QrBasis) else propose_scalable
    return [fn(wp, basis, row, opts) for row in rows]


def affine_proposals(wp: WhitenedProblem, basis, noise):
    """Proposals for an affine ``G`` in one batched linear solve.

    The proposal system is then linear, so a single Newton step is exact and
    every row of ``noise`` is handled at once.  Weights use the same
    formulas as the iterative path, evaluated column-wise.
    """
    t0 = time.process_time()
    noise = np.atleast_2d(np.asarray(noise, dtype=float))
    n = wp.n
    b = wp.G(np.zeros(n))
    A = wp.jacobian(np.zeros(n))
    if isinstance(basis, QrBasis):
        Qt, Qb = basis.Q[:n], basis.Q[n:]
        M = Qt.T + Qb.T @ A
        V = np.linalg.solve(M, basis.Q.T @ noise.T - (Qb.T @ b)[:, None])
        G = A @ V + b[:, None]
        S = Qt.T @ V + Qb.T @ G
        lw = -_logabsdet(M) - 0.5 * np.sum(V * V, 0) - 0.5 * np.sum(G * G, 0) + 0.5 * np.sum(S * S, 0)
    else:
        s, lam, Psi, Phi = basis.scale, basis.Lam, basis.Psi, basis.Phi
        Xi = noise.T
        Xr = Phi.T @ Xi
        Vp = Xi - Phi @ Xr
        K = np.eye(basis.r) + lam[:, None] * (Psi.T @ A @ Phi)
        Vr = np.linalg.solve(K, Xr / s[:, None] - lam[:, None] * (Psi.T @ (A @ Vp + b[:, None]))) if basis.r else Xr
        V = Vp + Phi @ Vr
        G = A @ V + b[:, None]
        T = s[:, None] * (Vr + lam[:, None] * (Psi.T @ G))
        logdet = float(np.sum(np.log(s))) + _logabsdet(K)
        lw = -logdet - 0.5 * np.sum(G * G, 0) - 0.5 * np.sum(Vr * Vr, 0) + 0.5 * np.sum(T * T, 0)
    seconds = (time.process_time() - t0) / len(noise)
    ok = np.isfinite(lw)
    return [
        Proposal(v=V[:, k].copy(), log_weight=float(lw[k]) if ok[k] else -np.inf, valid=bool(ok[k]), noise=noise[k], seconds=seconds)
        for k in range(len(noise))
    ]


def generate_proposals(wp, basis, n_samples, seed, workers=1, opts: SolverOptions = SolverOptions(), noise=None):
    """Proposals for indices ``0..n_samples-1``; results do not depend on ``workers``.

    Affine models take the batched closed-form path.
    """
    if noise is None:
        noise = draw_reference_noise(seed, n_samples, basis.noise_dim)
    if getattr(wp.forward, "is_linear", False):
        return affine_proposals(wp, basis, noise)
    if workers <= 1 or n_samples < 2:
        return _propose_chunk((wp, basis, noise, opts))
    chunks = np.array_split(noise, min(workers * 4, n_samples))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(_propose_chunk, [(wp, basis, c, opts) for c in chunks])
        return [p for part in parts for p in part]
