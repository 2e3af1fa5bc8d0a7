"""Matrix-free Levenberg-Marquardt for nonlinear least squares.

Minimises ``0.5 * ||r(x)||^2`` using only residual evaluations and the
actions of the residual Jacobian and its transpose.  Each damped
Gauss-Newton system ``(J^T J + mu I) p = -J^T r`` is solved by conjugate
gradients, so the Jacobian is never formed.  A linearization that carries
a dense ``matrix`` is instead solved directly by Cholesky factorisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg.lapack

from .problem import NonFiniteOutputError

__all__ = ["ResidualProblem", "SolverOptions", "SolveReport", "solve_nlls", "conjugate_gradient"]


class _Linearized:
    __slots__ = ("value", "jvp", "vjp")

    def __init__(self, value, jvp, vjp):
        self.value = value
        self.jvp = jvp
        self.vjp = vjp


@dataclass
class ResidualProblem:
    """Residual map with derivative actions.

    Either give ``jvp(x, dx)``/``vjp(x, dr)`` or a ``linearize(x)`` returning
    an object with ``value``, ``jvp(dx)`` and ``vjp(dr)``; the latter lets a
    model reuse its state (e.g. a factorised PDE operator) across the many
    actions of one CG solve.
    """

    residual: Callable
    x0: np.ndarray
    jvp: Optional[Callable] = None
    vjp: Optional[Callable] = None
    linearize: Optional[Callable] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.linearize is None:
            if self.jvp is None or self.vjp is None:
                raise ValueError("need jvp and vjp, or linearize")
            res, jvp, vjp = self.residual, self.jvp, self.vjp

            def linearize(x):
                return _Linearized(res(x), lambda dx: jvp(x, dx), lambda dr: vjp(x, dr))

            self.linearize = linearize


@dataclass(frozen=True)
class SolverOptions:
    ftol: float = 1e-6
    max_iters: int = 500
    cg_tol: float = 0.1
    cg_maxiter: Optional[int] = None
    gtol: float = 0.0
    # only accept "objective below ftol" as success (RTO systems have a zero minimum)
    zero_residual: bool = False
    damping0: float = 1e-8
    divergence_factor: float = 1e12


@dataclass
class SolveReport:
    x: np.ndarray
    objective: float
    iterations: int = 0
    residual_evals: int = 0
    jvp_evals: int = 0
    vjp_evals: int = 0
    cg_iterations: int = 0
    dense_solves: int = 0
    converged: bool = False
    reason: str = ""
    initial_objective: float = float("nan")
    objective_history: list = field(default_factory=list, repr=False)


def conjugate_gradient(matvec, b, tol, maxiter):
    """Plain CG for an SPD operator. Returns ``(x, residual, iterations)``."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = r @ r
    stop = (tol * np.sqrt(rr)) ** 2
    k = 0
    while k < maxiter and rr > stop:
        Ap = matvec(p)
        pAp = p @ Ap
        if pAp <= 0:
            break
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        k += 1
    return x, r, k


def _damped_direct(J, g, mu):
    A = J.T @ J
    A.flat[:: A.shape[0] + 1] += mu
    _, p, info = scipy.linalg.lapack.dposv(A, -g)
    if info != 0:
        raise np.linalg.LinAlgError(f"damped normal matrix is not positive definite (info={info})")
    return p


def _objective(r):
    return 0.5 * float(r @ r)


def solve_nlls(prob: ResidualProblem, opts: SolverOptions = SolverOptions(), callback=None) -> SolveReport:
    """Levenberg-Marquardt with Nielsen damping updates and CG inner solves.

    Accepted steps never increase the objective.  Stopping rules: objective
    below ``ftol``; decrease over an accepted step below ``ftol`` (not used
    when ``opts.zero_residual``); gradient norm at most ``gtol``.
    """
    return _solve(prob, opts, callback)[0]


def _solve(prob, opts, callback=None):
    """Returns the report and the linearization at the final iterate."""
    x = prob.x0.copy()
    if not np.all(np.isfinite(x)):
        raise ValueError("starting point is not finite")
    rep = SolveReport(x=x, objective=np.inf)

    def linearize(z):
        lin = prob.linearize(z)
        rep.residual_evals += 1
        # columns spent assembling a dense Jacobian, if the system builds one
        n_jvp, n_vjp = getattr(lin, "batched", (0, 0))
        rep.jvp_evals += n_jvp
        rep.vjp_evals += n_vjp
        return lin

    def counted(lin):
        def jvp(dx):
            rep.jvp_evals += 1
            return lin.jvp(dx)

        def vjp(dr):
            rep.vjp_evals += 1
            return lin.vjp(dr)

        return jvp, vjp

    try:
        lin = linearize(x)
        r = np.asarray(lin.value, dtype=float)
        if not np.isfinite(r @ r):
            raise NonFiniteOutputError("residual")
    except (NonFiniteOutputError, FloatingPointError, np.linalg.LinAlgError) as exc:
        rep.reason = f"non-finite residual at start: {exc}"
        return rep, None

    f = _objective(r)
    rep.objective = rep.initial_objective = f
    rep.objective_history.append(f)
    d = x.size
    cg_maxiter = opts.cg_maxiter or max(2 * d, 10)

    if f <= opts.ftol:
        rep.converged, rep.reason = True, "objective below ftol"
        return rep, lin

    jvp, vjp = counted(lin)
    g = vjp(r)
    gnorm = np.sqrt(g @ g)
    if gnorm == 0.0:
        rep.converged = not opts.zero_residual
        rep.reason = "zero gradient"
        return rep, lin
    Jg = jvp(g)
    mu = opts.damping0 * max(float(Jg @ Jg) / gnorm**2, 1e-300)
    nu = 2.0

    while rep.iterations < opts.max_iters:
        if gnorm <= opts.gtol:
            rep.converged, rep.reason = True, "gradient below gtol"
            break
        rep.iterations += 1

        J = getattr(lin, "matrix", None)
        if J is not None:
            p = _damped_direct(J, g, mu)
            cg_res = np.zeros_like(p)
            rep.dense_solves += 1
        else:

            def normal_op(p, _mu=mu):
                return vjp(jvp(p)) + _mu * p

            p, cg_res, k = conjugate_gradient(normal_op, -g, opts.cg_tol, cg_maxiter)
            rep.cg_iterations += k
        # predicted decrease of the local quadratic model, using the CG residual
        gp = float(g @ p)
        pred = -0.5 * gp + 0.5 * float(cg_res @ p) + 0.5 * mu * float(p @ p)
        x_new = x + p
        try:
            lin_new = linearize(x_new)
            r_new = np.asarray(lin_new.value, dtype=float)
            f_new = _objective(r_new)
            if not np.isfinite(f_new):
                f_new = np.inf
        except (NonFiniteOutputError, FloatingPointError, np.linalg.LinAlgError):
            lin_new, f_new = None, np.inf

        if f_new > opts.divergence_factor * rep.initial_objective and np.isfinite(f_new):
            rep.reason = "diverged"
            break

        rho = (f - f_new) / pred if pred > 0 else -1.0
        if f_new < f and rho > 1e-4:
            decrease = f - f_new
            x, r, f, lin = x_new, r_new, f_new, lin_new
            rep.objective_history.append(f)
            mu *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
            nu = 2.0
            if callback is not None:
                callback(x, f)
            if f <= opts.ftol:
                rep.converged, rep.reason = True, "objective below ftol"
                break
            if decrease < opts.ftol and not opts.zero_residual:
                rep.converged, rep.reason = True, "objective change below ftol"
                break
            jvp, vjp = counted(lin)
            g = vjp(r)
            gnorm = np.sqrt(g @ g)
        else:
            mu *= nu
            nu *= 2.0
            if not np.isfinite(mu) or mu > 1e300:
                rep.reason = "damping overflow"
                break
            if np.linalg.norm(p) <= 1e-15 * (np.linalg.norm(x) + 1e-15):
                rep.reason = "step below machine precision"
                rep.converged = not opts.zero_residual
                break
    else:
        rep.reason = "max_iters exceeded"

    rep.x = x
    rep.objective = f
    return rep, lin
