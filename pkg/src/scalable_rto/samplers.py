"""Turning proposals into posterior samples.

RTO proposals are corrected either by a Metropolis independence chain or by
self-normalised importance sampling.  The module also carries the baseline
samplers used for comparison: preconditioned Crank-Nicolson, random-map
implicit sampling and Metropolised randomised maximum likelihood (RML).

Uniform acceptance draws are taken in proposal-index order from their own
stream, so the serial Metropolis pass can be replayed on stored proposals
and does not depend on how those proposals were generated.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.optimize

from .optimizer import ResidualProblem, SolverOptions, solve_nlls
from .problem import NonFiniteOutputError, WhitenedProblem
from .rto import Proposal

__all__ = [
    "Chain",
    "WeightedSamples",
    "EmptyChainError",
    "metropolize",
    "normalize_weights",
    "importance_samples",
    "is_estimate",
    "pcn_chain",
    "implicit_propose",
    "implicit_setup",
    "RmlProposal",
    "rml_propose",
    "rml_log_density",
    "rml_log_target",
    "rml_metropolize",
    "rml_importance_samples",
]


class EmptyChainError(ValueError):
    """No proposals were supplied to a Metropolis pass."""


def _acceptance_stream(seed):
    # the second child of the run seed; the first one drives proposal noise
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])


def _cost_totals(proposals):
    totals = dict(forward_evals=0, jvp_evals=0, vjp_evals=0, optimizer_iterations=0, cg_iterations=0)
    for p in proposals:
        totals["forward_evals"] += p.weight_evals
        totals["jvp_evals"] += p.weight_actions
        rep = p.report
        if rep is not None:
            totals["forward_evals"] += rep.residual_evals
            totals["jvp_evals"] += rep.jvp_evals
            totals["vjp_evals"] += rep.vjp_evals
            totals["optimizer_iterations"] += rep.iterations
            totals["cg_iterations"] += rep.cg_iterations
    totals["proposals"] = len(proposals)
    totals["invalid"] = sum(not p.valid for p in proposals)
    return totals


@dataclass
class Chain:
    """Markov chain after ``len(accepted)`` steps.

    ``states[k]`` is the state after step ``k``; ``log_weights[k]`` is the
    log weight of that state.  ``iterations[k]`` is the optimizer iteration
    count spent on the ``k``-th proposal (zero for samplers without one).
    """

    states: np.ndarray
    accepted: np.ndarray
    log_weights: np.ndarray
    seed: Optional[int] = None
    timings: dict = field(default_factory=dict)
    costs: dict = field(default_factory=dict)
    iterations: Optional[np.ndarray] = None

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.accepted = np.asarray(self.accepted, dtype=bool)
        self.log_weights = np.asarray(self.log_weights, dtype=float)
        if self.states.ndim != 2 or len(self.states) != len(self.accepted):
            raise ValueError("states must be (steps, dim) with one accepted flag per step")

    def __len__(self):
        return len(self.accepted)

    @property
    def acceptance_rate(self):
        return float(np.mean(self.accepted)) if len(self) else float("nan")

    def discard(self, fraction):
        """Copy of the chain without its first ``fraction`` of steps."""
        k = int(np.floor(fraction * len(self)))
        return Chain(
            self.states[k:],
            self.accepted[k:],
            self.log_weights[k:],
            self.seed,
            dict(self.timings),
            dict(self.costs),
            None if self.iterations is None else self.iterations[k:],
        )


def metropolize(proposals: Sequence[Proposal], v0, logw0: float, seed) -> Chain:
    """Metropolis independence chain over precomputed proposals.

    Accept ``v'`` when ``log u < log w(v') - log w(v)``.  Invalid proposals
    are always rejected; one uniform is consumed per proposal regardless.
    """
    if len(proposals) == 0:
        raise EmptyChainError("no proposals to metropolize")
    t0 = time.process_time()
    logu = np.log(_acceptance_stream(seed).random(len(proposals)))
    v = np.asarray(v0, dtype=float)
    lw = float(logw0)
    N = len(proposals)
    states = np.empty((N, v.size))
    accepted = np.zeros(N, dtype=bool)
    log_weights = np.empty(N)
    for k, p in enumerate(proposals):
        if p.valid and logu[k] < p.log_weight - lw:
            v, lw = p.v, p.log_weight
            accepted[k] = True
        states[k] = v
        log_weights[k] = lw
    iters = np.array([p.report.iterations if p.report is not None else 0 for p in proposals])
    chain = Chain(states, accepted, log_weights, seed, costs=_cost_totals(proposals), iterations=iters)
    chain.timings["metropolis"] = time.process_time() - t0
    chain.timings["proposals"] = float(sum(p.seconds for p in proposals))
    return chain


# ---------------------------------------------------------------------------
# importance sampling
# ---------------------------------------------------------------------------


@dataclass
class WeightedSamples:
    samples: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.samples) != len(self.weights):
            raise ValueError("one weight per sample")

    @property
    def ess(self):
        """Kish effective sample size ``1 / sum w^2``."""
        return float(1.0 / np.sum(self.weights**2))


def normalize_weights(log_weights) -> np.ndarray:
    """``exp(lw - max) / sum exp(lw - max)``; ``-inf`` entries get weight 0."""
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if not np.any(finite):
        raise ValueError("no finite log-weight")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise ValueError("log-weights must be finite or -inf")
    w = np.zeros_like(lw)
    w[finite] = np.exp(lw[finite] - lw[finite].max())
    return w / w.sum()


def importance_samples(proposals: Sequence[Proposal]) -> WeightedSamples:
    lw = [p.log_weight if p.valid else -np.inf for p in proposals]
    return WeightedSamples(np.array([p.v for p in proposals]), normalize_weights(lw))


def is_estimate(ws: WeightedSamples, g: Callable) -> float:
    """Self-normalised estimate ``sum_i w_i g(v_i)``."""
    vals = np.array([g(v) for v in ws.samples], dtype=float)
    return float(ws.weights @ vals)


# ---------------------------------------------------------------------------
# preconditioned Crank-Nicolson
# ---------------------------------------------------------------------------


def pcn_chain(wp: WhitenedProblem, beta: float, steps: int, v0, seed) -> Chain:
    """pCN on the whitened target: ``v' = sqrt(1 - beta^2) v + beta xi``,
    accepted with probability ``min(1, exp(Phi(v) - Phi(v')))`` where
    ``Phi = 0.5 ||G||^2``.  ``log_weights`` holds ``-Phi`` of each state."""
    if not 0 < beta <= 1:
        raise ValueError("beta must lie in (0, 1]")
    t0 = time.process_time()
    rng = np.random.default_rng(seed)
    a = np.sqrt(1.0 - beta**2)
    v = np.asarray(v0, dtype=float).copy()
    g = wp.G(v)
    phi = 0.5 * float(g @ g)
    states = np.empty((steps, v.size))
    accepted = np.zeros(steps, dtype=bool)
    log_weights = np.empty(steps)
    evals = 1
    for k in range(steps):
        xi = rng.standard_normal(v.size)
        logu = np.log(rng.random())
        cand = a * v + beta * xi
        try:
            gc = wp.G(cand)
            phi_c = 0.5 * float(gc @ gc)
        except (NonFiniteOutputError, FloatingPointError, np.linalg.LinAlgError):
            phi_c = np.inf
        evals += 1
        if logu < phi - phi_c:
            v, phi = cand, phi_c
            accepted[k] = True
        states[k] = v
        log_weights[k] = -phi
    chain = Chain(states, accepted, log_weights, seed, iterations=np.zeros(steps, dtype=int))
    chain.costs = dict(forward_evals=evals, jvp_evals=0, vjp_evals=0, optimizer_iterations=0, cg_iterations=0)
    chain.timings["pcn"] = time.process_time() - t0
    return chain


# ---------------------------------------------------------------------------
# implicit sampling
# ---------------------------------------------------------------------------


def implicit_propose(
    ell: Callable,
    v_map,
    L,
    xi,
    grad: Optional[Callable] = None,
    ell_min: Optional[float] = None,
    max_doublings: int = 60,
) -> Proposal:
    """Random-map implicit sampling along the ray ``v = v_map + t L xi/|xi|``.

    ``t >= 0`` solves ``ell(v) - ell(v_map) = 0.5 |xi|^2``, so ``v`` lies in
    direction ``xi`` in the coordinates ``z = L^{-1}(v - v_map)``.  For the
    Gaussian case to be reproduced exactly ``L L^T`` must equal the inverse
    Hessian at the mode; a symmetric ``L`` also has ``L^T L`` equal to it.

    The log weight is ``-ell(v) - log q(v)`` with ``q`` the pushforward of a
    standard normal through the radial map ``|xi| -> t``.  ``grad`` (the
    gradient of ``ell``) is needed for the weight; without it a central
    difference along the ray is used.
    """
    t0 = time.process_time()
    v_map = np.asarray(v_map, dtype=float)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    xi = np.asarray(xi, dtype=float)
    n = v_map.size
    if ell_min is None:
        ell_min = float(ell(v_map))
    _, logdetL = np.linalg.slogdet(L)
    rho = float(np.linalg.norm(xi))
    const = -ell_min + 0.5 * n * np.log(2 * np.pi) + logdetL
    if rho == 0.0:
        # limit of the weight for a locally quadratic ell with L^T Hess L = I
        return Proposal(v=v_map.copy(), log_weight=const, valid=True, noise=xi, seconds=time.process_time() - t0)

    d = L @ (xi / rho)
    level = 0.5 * rho**2

    def phi(t):
        return float(ell(v_map + t * d)) - ell_min - level

    prop = Proposal(v=v_map.copy(), log_weight=-np.inf, valid=False, noise=xi)
    t_lo, t_hi = 0.0, rho
    evals = 0
    try:
        f_hi = phi(t_hi)
        evals += 1
        for _ in range(max_doublings):
            if f_hi > 0:
                break
            t_lo, t_hi = t_hi, 2.0 * t_hi
            f_hi = phi(t_hi)
            evals += 1
        if not f_hi > 0:
            prop.reason = "root not bracketed along the ray"
            return prop
        t, res = scipy.optimize.brentq(phi, t_lo, t_hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, full_output=True)
        evals += res.function_calls
        v = v_map + t * d
        if grad is not None:
            slope = float(np.asarray(grad(v)) @ d)
        else:
            h = 1e-6 * max(t, 1.0)
            slope = (phi(t + h) - phi(t - h)) / (2 * h)
            evals += 2
    except (NonFiniteOutputError, FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
        prop.reason = f"ray search failed: {exc}"
        return prop
    prop.v = v
    prop.weight_evals = evals
    if not (t > 0 and slope > 0):
        prop.reason = "level set is not star-shaped along this ray"
        return prop
    prop.log_weight = float(const + (n - 1) * np.log(t / rho) + np.log(rho / slope))
    prop.valid = bool(np.isfinite(prop.log_weight))
    prop.seconds = time.process_time() - t0
    return prop


def implicit_setup(wp: WhitenedProblem, v_map):
    """Negative log target, its gradient, ``ell(v_map)`` and a symmetric factor
    ``L`` with ``L L^T = L^T L = Hess^{-1}`` for a whitened problem.

    The Hessian includes the second-order term of the forward model, so it
    is assembled densely; intended for small ``n``.
    """
    v_map = np.asarray(v_map, dtype=float)

    def ell(v):
        g = wp.G(v)
        return 0.5 * float(v @ v) + 0.5 * float(g @ g)

    def grad(v):
        lin = wp.linearize(v)
        return v + lin.vjp(lin.value)

    J = wp.jacobian(v_map)
    g = wp.G(v_map)
    second = np.column_stack([wp.G_hvp(v_map, g, e) for e in np.eye(wp.n)])
    hess = np.eye(wp.n) + J.T @ J + 0.5 * (second + second.T)
    evals, vecs = np.linalg.eigh(hess)
    if evals.min() <= 0:
        raise np.linalg.LinAlgError("Hessian at the mode is not positive definite")
    L = (vecs / np.sqrt(evals)) @ vecs.T
    return ell, grad, ell(v_map), L


# ---------------------------------------------------------------------------
# randomised maximum likelihood
# ---------------------------------------------------------------------------

RML_SOLVER = SolverOptions(ftol=0.0, max_iters=500, cg_tol=1e-10, gtol=1e-5)


@dataclass
class RmlProposal:
    v: np.ndarray
    d: np.ndarray
    log_density: float
    valid: bool
    residuals: tuple = (np.inf, np.inf)
    report: object = None
    reason: str = ""

    @property
    def state(self):
        return np.concatenate([self.v, self.d])


def _rml_map(wp, rho, v, d):
    """The map whose inverse generates RML proposals, and its parts."""
    lin = wp.linearize(v)
    G = lin.value
    top = v + lin.vjp(G - d) / rho
    bottom = d / rho - (1.0 - rho) / rho * G
    return top, bottom, lin


def rml_log_density(wp: WhitenedProblem, rho: float, v, d) -> float:
    """Log density of the RML proposal at ``(v, d)``.

    With ``J = grad G(v)`` the map Jacobian has determinant
    ``rho^-m det(I + J^T J + rho^-1 sum_k (G - d)_k Hess G_k)``.
    """
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    n, m = wp.n, wp.m
    top, bottom, lin = _rml_map(wp, rho, v, d)
    G = lin.value
    J = np.asarray(lin.jvp(np.eye(n))).reshape(m, n)
    second = np.column_stack([wp.G_hvp(v, G - d, e) for e in np.eye(n)]) if n else np.zeros((0, 0))
    # Schur complement of the d-block of the map Jacobian
    M = np.eye(n) + J.T @ J + second / rho
    sign, logdet = np.linalg.slogdet(M)
    if sign == 0:
        return -np.inf
    logdet -= m * np.log(rho)
    sq = float(top @ top + bottom @ bottom)
    return -0.5 * (n + m) * np.log(2 * np.pi) - 0.5 * sq + logdet


def rml_log_target(wp: WhitenedProblem, gamma: float, v, d) -> float:
    """Augmented log target whose ``v`` marginal is the posterior."""
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    g = wp.G(v)
    r = g - d
    return -0.5 * float(v @ v) - float(r @ r) / (2 * gamma) - float(d @ d) / (2 * (1 - gamma))


def rml_propose(
    wp: WhitenedProblem,
    rho: float,
    xi_v,
    xi_d,
    opts: SolverOptions = RML_SOLVER,
    tol: float = 1e-8,
) -> RmlProposal:
    """Minimise ``0.5|v - xi_v|^2 + |G(v) - d|^2/(2 rho) + |d - xi_d|^2/(2(1 - rho))``.

    The proposal is valid when both first-order optimality residuals are
    at most ``tol``.
    """
    if not 0 < rho < 1:
        raise ValueError("rho must lie in (0, 1)")
    xi_v = np.asarray(xi_v, dtype=float)
    xi_d = np.asarray(xi_d, dtype=float)
    n = wp.n
    a, b = 1.0 / np.sqrt(rho), 1.0 / np.sqrt(1.0 - rho)

    class _Lin:
        __slots__ = ("value", "jvp", "vjp")

        def __init__(self, x):
            v, d = x[:n], x[n:]
            lin = wp.linearize(v)
            self.value = np.concatenate([v - xi_v, a * (lin.value - d), b * (d - xi_d)])
            self.jvp = lambda dx: np.concatenate([dx[:n], a * (lin.jvp(dx[:n]) - dx[n:]), b * dx[n:]])

            def vjp(r):
                r1, r2, r3 = r[:n], r[n : n + wp.m], r[n + wp.m :]
                return np.concatenate([r1 + a * lin.vjp(r2), -a * r2 + b * r3])

            self.vjp = vjp

    try:
        # v = xi_v with d solving the second optimality equation
        x0 = np.concatenate([xi_v, rho * xi_d + (1 - rho) * wp.G(xi_v)])
        prob = ResidualProblem(residual=lambda x: _Lin(x).value, x0=x0, linearize=_Lin)
        rep = solve_nlls(prob, opts)
    except (NonFiniteOutputError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return RmlProposal(xi_v, xi_d, -np.inf, False, reason=f"solver failed: {exc}")
    v, d = rep.x[:n], rep.x[n:]
    try:
        v, d, res = _rml_polish(wp, rho, v, d, xi_v, xi_d, tol)
    except (NonFiniteOutputError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return RmlProposal(v, d, -np.inf, False, report=rep, reason=f"polish failed: {exc}")
    prop = RmlProposal(v, d, -np.inf, False, res, rep)
    if max(res) > tol:
        prop.reason = f"optimality residual {max(res):.2e} above {tol:g}"
        return prop
    prop.log_density = rml_log_density(wp, rho, v, d)
    prop.valid = bool(np.isfinite(prop.log_density))
    return prop


def _rml_map_jacobian(wp, rho, v, d, lin):
    n, m = wp.n, wp.m
    G = lin.value
    J = np.asarray(lin.jvp(np.eye(n))).reshape(m, n)
    second = np.column_stack([wp.G_hvp(v, G - d, e) for e in np.eye(n)]) if n else np.zeros((0, 0))
    top = np.hstack([np.eye(n) + (J.T @ J + second) / rho, -J.T / rho])
    bottom = np.hstack([-(1.0 - rho) / rho * J, np.eye(m) / rho])
    return np.vstack([top, bottom])


def _rml_polish(wp, rho, v, d, xi_v, xi_d, tol, max_steps=10):
    """Newton steps on the optimality system itself.

    Near the optimum the objective change drops below rounding before the
    optimality residual reaches ``tol``; the system has no such floor.
    """
    n = wp.n
    xi = np.concatenate([xi_v, xi_d])
    top, bottom, lin = _rml_map(wp, rho, v, d)
    r = np.concatenate([top, bottom]) - xi
    for _ in range(max_steps):
        if np.linalg.norm(r) <= 1e-3 * tol:
            break
        step = np.linalg.solve(_rml_map_jacobian(wp, rho, v, d, lin), r)
        v_new, d_new = v - step[:n], d - step[n:]
        top, bottom, lin_new = _rml_map(wp, rho, v_new, d_new)
        r_new = np.concatenate([top, bottom]) - xi
        if not np.linalg.norm(r_new) < np.linalg.norm(r):
            break
        v, d, r, lin = v_new, d_new, r_new, lin_new
    return v, d, (float(np.linalg.norm(r[:n])), float(np.linalg.norm(r[n:])))


def _rml_log_weights(wp, gamma, proposals):
    return np.array([rml_log_target(wp, gamma, p.v, p.d) - p.log_density if p.valid else -np.inf for p in proposals])


def rml_importance_samples(wp: WhitenedProblem, gamma: float, proposals: Sequence[RmlProposal]) -> WeightedSamples:
    """Weighted ``v`` samples; the ``d`` part is marginalised by ignoring it."""
    return WeightedSamples(np.array([p.v for p in proposals]), normalize_weights(_rml_log_weights(wp, gamma, proposals)))


def rml_metropolize(wp: WhitenedProblem, gamma: float, rho: float, proposals: Sequence[RmlProposal], seed, x0=None) -> Chain:
    """Independence chain on ``(v, d)`` with weight ``pi(v, d) / q(v, d)``.

    Without ``x0`` the chain starts from the first valid proposal.  ``rho``
    only documents which proposal map produced ``proposals``.
    """
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    if len(proposals) == 0:
        raise EmptyChainError("no proposals to metropolize")
    lw = _rml_log_weights(wp, gamma, proposals)
    if x0 is None:
        valid = [i for i, p in enumerate(proposals) if p.valid]
        if not valid:
            raise EmptyChainError("no valid RML proposal to start from")
        x0, lw0 = proposals[valid[0]].state, lw[valid[0]]
    else:
        x0 = np.asarray(x0, dtype=float)
        lw0 = rml_log_target(wp, gamma, x0[: wp.n], x0[wp.n :]) - rml_log_density(wp, rho, x0[: wp.n], x0[wp.n :])
    wrapped = [Proposal(v=p.state, log_weight=float(w), valid=p.valid, report=p.report) for p, w in zip(proposals, lw)]
    return metropolize(wrapped, x0, lw0, seed)
