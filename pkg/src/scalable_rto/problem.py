"""Bayesian inverse problems in whitened coordinates.

A :class:`BayesProblem` couples a forward model with Gaussian prior and noise
factors.  :func:`whiten` turns it into a :class:`WhitenedProblem` whose target
density is ``exp(-0.5 * ||H(v)||^2)`` with ``H(v) = (v, G(v))``.

Derivative actions accept either a single direction (1-D array) or a matrix
whose columns are directions; the result has the matching shape.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import scipy.linalg

__all__ = [
    "FactorizationError",
    "NonFiniteOutputError",
    "DerivativeUnavailableError",
    "LinearFactor",
    "DenseFactor",
    "ScaledIdentity",
    "ForwardModel",
    "Linearization",
    "BayesProblem",
    "WhitenedProblem",
    "whiten",
    "unwhiten",
    "eval_H",
    "log_target",
    "jvp_H",
    "vjp_H",
]


class FactorizationError(np.linalg.LinAlgError):
    """A covariance factor is singular or could not be computed."""


class NonFiniteOutputError(FloatingPointError):
    """A model returned NaN or infinite values."""


class DerivativeUnavailableError(NotImplementedError):
    """The model does not provide the requested derivative action."""


def _check_finite(x, what):
    # a sum is finite only if every entry is (overflowing sums are rejected too)
    if not np.isfinite(np.sum(x)):
        raise NonFiniteOutputError(f"{what} produced non-finite values")
    return x


# ---------------------------------------------------------------------------
# Covariance factors
# ---------------------------------------------------------------------------


class LinearFactor:
    """Square operator ``S`` with ``S S^T`` equal to a covariance.

    Subclasses implement the four actions; all of them must accept vectors
    and column-stacked matrices.
    """

    dim: int

    def apply(self, x):
        raise NotImplementedError

    def apply_T(self, x):
        raise NotImplementedError

    def solve(self, x):
        raise NotImplementedError

    def solve_T(self, x):
        raise NotImplementedError

    def dense(self):
        """Dense matrix of the factor (for small problems and tests)."""
        return self.apply(np.eye(self.dim))


class DenseFactor(LinearFactor):
    """Lower-triangular dense factor, usually a Cholesky factor."""

    def __init__(self, L):
        L = np.asarray(L, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1]:
            raise ValueError("factor must be a square matrix")
        d = np.abs(np.diag(L))
        if not np.allclose(L, np.tril(L)):
            raise ValueError("DenseFactor expects a lower-triangular matrix")
        if d.size and d.min() <= 1e-14 * max(d.max(), 1.0):
            raise FactorizationError("singular triangular factor")
        self.L = L
        self.dim = L.shape[0]

    @classmethod
    def from_covariance(cls, cov):
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise FactorizationError(f"covariance is not SPD: {exc}") from exc
        return cls(L)

    def apply(self, x):
        return self.L @ x

    def apply_T(self, x):
        return self.L.T @ x

    def solve(self, x):
        return scipy.linalg.solve_triangular(self.L, x, lower=True)

    def solve_T(self, x):
        return scipy.linalg.solve_triangular(self.L, x, lower=True, trans="T")

    def dense(self):
        return self.L.copy()


class ScaledIdentity(LinearFactor):
    """``scale * I``; the usual factor for i.i.d. noise or a white prior."""

    def __init__(self, dim, scale=1.0):
        if scale == 0 or not np.isfinite(scale):
            raise FactorizationError("scale must be finite and nonzero")
        self.dim = int(dim)
        self.scale = float(scale)

    def apply(self, x):
        return self.scale * x

    apply_T = apply

    def solve(self, x):
        return x / self.scale

    solve_T = solve


# ---------------------------------------------------------------------------
# Forward models
# ---------------------------------------------------------------------------


class Linearization:
    """Value and derivative actions of a map at a fixed point.

    The default implementation simply forwards to the model; models with an
    expensive state (e.g. a PDE solve) return a subclass that reuses it.
    """

    def __init__(self, model, x, value=None):
        self.model = model
        self.x = x
        self.value = model.eval(x) if value is None else value

    def jvp(self, dx):
        return self.model.jvp(self.x, dx)

    def vjp(self, dy):
        return self.model.vjp(self.x, dy)


class ForwardModel:
    """Interface every forward map implements.

    ``eval(x)`` returns the model output; ``jvp``/``vjp`` are the actions of
    the Jacobian and its transpose at ``x``.  ``hvp(x, w, dx)`` is the
    derivative of ``vjp(x, w)`` in direction ``dx``; the default uses central
    differences of ``vjp``.  Models that are affine set ``is_linear`` so
    samplers may solve their systems in closed form.

    ``jvp`` and ``vjp`` must also accept column-stacked directions, an
    ``(n, k)`` or ``(m, k)`` array, and return one result column per input
    column.  Dense Jacobians and reduced systems are assembled this way.
    """

    is_linear = False

    def dims(self):
        raise NotImplementedError

    def eval(self, x):
        raise NotImplementedError

    def jvp(self, x, dx):
        raise DerivativeUnavailableError(f"{type(self).__name__} has no jvp")

    def vjp(self, x, dy):
        raise DerivativeUnavailableError(f"{type(self).__name__} has no vjp")

    def linearize(self, x):
        return Linearization(self, x)

    def hvp(self, x, w, dx, h=1e-6):
        x = np.asarray(x, dtype=float)
        dx = np.asarray(dx, dtype=float)
        scale = h * max(1.0, np.linalg.norm(x)) / max(np.linalg.norm(dx), 1e-300)
        return (self.vjp(x + scale * dx, w) - self.vjp(x - scale * dx, w)) / (2 * scale)


# ---------------------------------------------------------------------------
# Problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BayesProblem:
    """``y = F(u) + eps`` with ``u ~ N(m_pr, S_pr S_pr^T)`` and
    ``eps ~ N(0, S_obs S_obs^T)``."""

    forward: ForwardModel
    y: np.ndarray
    prior_mean: np.ndarray
    prior_factor: LinearFactor
    obs_factor: LinearFactor

    def __post_init__(self):
        n, m = self.forward.dims()
        y = np.asarray(self.y, dtype=float)
        mp = np.asarray(self.prior_mean, dtype=float)
        if m < 1:
            raise ValueError("need at least one observation")
        if y.shape != (m,):
            raise ValueError(f"data has shape {y.shape}, model output is {m}")
        if mp.shape != (n,):
            raise ValueError(f"prior mean has shape {mp.shape}, model input is {n}")
        if self.prior_factor.dim != n or self.obs_factor.dim != m:
            raise ValueError("factor dimensions do not match the model")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "prior_mean", mp)


class _WhitenedLinearization:
    """Cached linearization of ``G`` at one point."""

    __slots__ = ("wp", "v", "inner", "value")

    def __init__(self, wp, v):
        self.wp = wp
        self.v = v
        u = wp.prior_factor.apply(v) + wp.prior_mean
        self.inner = wp.forward.linearize(u)
        raw = self.inner.value - wp.y
        self.value = _check_finite(wp.obs_factor.solve(raw), "forward model")

    def jvp(self, dv):
        wp = self.wp
        return wp.obs_factor.solve(self.inner.jvp(wp.prior_factor.apply(dv)))

    def vjp(self, dy):
        wp = self.wp
        return wp.prior_factor.apply_T(self.inner.vjp(wp.obs_factor.solve_T(dy)))


class WhitenedProblem:
    """Whitened map ``G(v) = S_obs^{-1}(F(S_pr v + m_pr) - y)``.

    Immutable after construction, so one instance can be shared by many
    proposal workers.  ``data`` is the zero vector by construction.
    """

    def __init__(self, problem: BayesProblem):
        self.problem = problem
        self.forward = problem.forward
        self.y = problem.y
        self.prior_mean = problem.prior_mean
        self.prior_factor = problem.prior_factor
        self.obs_factor = problem.obs_factor
        self.n, self.m = problem.forward.dims()
        self.data = np.zeros(self.m)

    def G(self, v):
        return self.linearize(v).value

    def linearize(self, v):
        return _WhitenedLinearization(self, np.asarray(v, dtype=float))

    def G_jvp(self, v, dv):
        return self.linearize(v).jvp(dv)

    def G_vjp(self, v, dy):
        return self.linearize(v).vjp(dy)

    def G_hvp(self, v, w, dv):
        """Derivative of ``v -> grad G(v)^T w`` in direction ``dv``."""
        u = self.prior_factor.apply(v) + self.prior_mean
        w_raw = self.obs_factor.solve_T(w)
        inner = self.forward.hvp(u, w_raw, self.prior_factor.apply(dv))
        return self.prior_factor.apply_T(inner)

    def jacobian(self, v):
        """Dense ``grad G(v)`` built from min(n, m) batched actions."""
        lin = self.linearize(v)
        if self.m <= self.n:
            return np.asarray(lin.vjp(np.eye(self.m))).T
        return np.asarray(lin.jvp(np.eye(self.n)))

    def to_whitened(self, u):
        return self.prior_factor.solve(np.asarray(u, dtype=float) - self.prior_mean)

    def __getstate__(self):
        return {"problem": self.problem}

    def __setstate__(self, state):
        self.__init__(state["problem"])


def whiten(problem: BayesProblem) -> WhitenedProblem:
    """Change variables so prior and noise are standard normal."""
    # probe the factors now so singular ones fail here rather than mid-run
    n, m = problem.forward.dims()
    for factor, d, name in ((problem.prior_factor, n, "prior"), (problem.obs_factor, m, "noise")):
        probe = factor.solve(np.ones(d))
        if not np.all(np.isfinite(probe)):
            raise FactorizationError(f"{name} factor is singular")
    return WhitenedProblem(problem)


def unwhiten(wp: WhitenedProblem, v):
    """Map whitened ``v`` back to ``u = S_pr v + m_pr``."""
    return wp.prior_factor.apply(np.asarray(v, dtype=float)) + wp.prior_mean


def eval_H(wp: WhitenedProblem, v):
    v = np.asarray(v, dtype=float)
    return np.concatenate([v, wp.G(v)])


def log_target(wp: WhitenedProblem, v):
    """Unnormalised log posterior ``-0.5 ||H(v)||^2``."""
    v = np.asarray(v, dtype=float)
    g = wp.G(v)
    return -0.5 * (v @ v) - 0.5 * (g @ g)


def jvp_H(wp: WhitenedProblem, v, dv):
    dv = np.asarray(dv, dtype=float)
    return np.concatenate([dv, wp.G_jvp(v, dv)], axis=0)


def vjp_H(wp: WhitenedProblem, v, dy):
    dy = np.asarray(dy, dtype=float)
    n = wp.n
    return dy[:n] + wp.G_vjp(v, dy[n:])


def dense_operator(matvec: Callable, dim: int, out_dim: Optional[int] = None):
    """Assemble a dense matrix column by column from a matvec."""
    cols = [matvec(e) for e in np.eye(dim)]
    return np.column_stack(cols) if cols else np.zeros((out_dim or 0, 0))
