"""Forward models: linear, a 2-D nonlinear toy, a 1-D cubic toy and the
1-D elliptic PDE with log-normal diffusivity."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack

from .problem import (
    BayesProblem,
    DenseFactor,
    FactorizationError,
    ForwardModel,
    LinearFactor,
    Linearization,
    ScaledIdentity,
)

_dpttrf, _dpttrs = lapack.dpttrf, lapack.dpttrs

__all__ = [
    "LinearModel",
    "Toy2dModel",
    "Cubic1dModel",
    "EllipticPriorFactor",
    "Elliptic1dModel",
    "EllipticConfig",
    "linear_model",
    "toy2d_model",
    "linear_gaussian_problem",
    "toy2d_problem",
    "cubic1d_problem",
    "elliptic_forward",
    "elliptic_adjoint_vjp",
    "elliptic_generate_data",
    "elliptic_noiseless_data",
    "default_source",
    "default_true_kappa",
    "elliptic_problem",
    "kappa_from_whitened",
]


class _DenseLinearization:
    __slots__ = ("value", "J")

    def __init__(self, value, J):
        self.value = value
        self.J = J

    def jvp(self, dx):
        return self.J @ dx

    def vjp(self, dy):
        return self.J.T @ dy


class LinearModel(ForwardModel):
    """``F(u) = A u``."""

    is_linear = True

    def __init__(self, A):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        if not np.all(np.isfinite(self.A)):
            raise ValueError("A must be finite")

    def dims(self):
        m, n = self.A.shape
        return n, m

    def eval(self, x):
        return self.A @ x

    def jvp(self, x, dx):
        return self.A @ dx

    def vjp(self, x, dy):
        return self.A.T @ dy

    def linearize(self, x):
        return _DenseLinearization(self.A @ x, self.A)

    def hvp(self, x, w, dx):
        return np.zeros_like(np.asarray(dx, dtype=float))


def linear_model(A) -> LinearModel:
    return LinearModel(A)


class Toy2dModel(ForwardModel):
    """``F(v) = 0.8 (v1 + 0.4 v2^2, v2 + 0.4 v1^2)``."""

    scale = 0.8
    curvature = 0.4

    def dims(self):
        return 2, 2

    def eval(self, x):
        c, a = self.scale, self.curvature
        return c * np.array([x[0] + a * x[1] ** 2, x[1] + a * x[0] ** 2])

    def jacobian(self, x):
        c, a = self.scale, self.curvature
        return c * np.array([[1.0, 2 * a * x[1]], [2 * a * x[0], 1.0]])

    def jvp(self, x, dx):
        return self.jacobian(x) @ dx

    def vjp(self, x, dy):
        return self.jacobian(x).T @ dy

    def linearize(self, x):
        return _DenseLinearization(self.eval(x), self.jacobian(x))

    def hvp(self, x, w, dx):
        c, a = self.scale, self.curvature
        dx = np.asarray(dx, dtype=float)
        return 2 * a * c * np.stack([w[1] * dx[0], w[0] * dx[1]])


def toy2d_model() -> Toy2dModel:
    return Toy2dModel()


class Cubic1dModel(ForwardModel):
    """Scalar ``F(u) = u + a u^3``; monotone, so every level set is a pair
    of points and implicit sampling applies."""

    def __init__(self, a=0.3):
        self.a = float(a)

    def dims(self):
        return 1, 1

    def eval(self, x):
        return x + self.a * x**3

    def jvp(self, x, dx):
        return (1.0 + 3 * self.a * x[0] ** 2) * np.asarray(dx, dtype=float)

    def vjp(self, x, dy):
        return (1.0 + 3 * self.a * x[0] ** 2) * np.asarray(dy, dtype=float)

    def hvp(self, x, w, dx):
        return 6 * self.a * x[0] * w[0] * np.asarray(dx, dtype=float)


def _noise_factor(m, sigma):
    return ScaledIdentity(m, sigma)


def linear_gaussian_problem(A, y, prior_mean=None, prior_cov=None, noise_cov=None) -> BayesProblem:
    model = LinearModel(A)
    n, m = model.dims()
    prior_mean = np.zeros(n) if prior_mean is None else prior_mean
    S_pr = ScaledIdentity(n) if prior_cov is None else DenseFactor.from_covariance(prior_cov)
    S_obs = ScaledIdentity(m) if noise_cov is None else DenseFactor.from_covariance(noise_cov)
    return BayesProblem(model, np.asarray(y, dtype=float), np.asarray(prior_mean, dtype=float), S_pr, S_obs)


def toy2d_problem(y=(0.5, 0.5), sigma=1.5) -> BayesProblem:
    """Toy posterior with a standard normal prior.

    The default data/noise keep the RTO map injective on [-6, 6]^2 at every
    truncation rank; stronger data fold the quadratic map.
    """
    return BayesProblem(Toy2dModel(), np.asarray(y, dtype=float), np.zeros(2), ScaledIdentity(2), _noise_factor(2, sigma))


def cubic1d_problem(y=1.0, sigma=0.5, a=0.3) -> BayesProblem:
    return BayesProblem(Cubic1dModel(a), np.array([y], dtype=float), np.zeros(1), ScaledIdentity(1), _noise_factor(1, sigma))


# ---------------------------------------------------------------------------
# 1-D elliptic PDE
# ---------------------------------------------------------------------------


class EllipticPriorFactor(LinearFactor):
    """Prior factor whose inverse is the scaled first-difference operator

        S^{-1} = sqrt(n) * [[sqrt(n), 0, ..., 0, sqrt(n)],
                            [-1, 1, ...],
                            ...,
                            [..., -1, 1]]

    All four actions cost O(n).
    """

    def __init__(self, n):
        if n < 2:
            raise ValueError("need n >= 2")
        self.dim = int(n)
        self.rn = np.sqrt(n)

    def solve(self, u):
        # S^{-1} u
        u = np.asarray(u, dtype=float)
        n, rn = self.dim, self.rn
        out = np.empty_like(u)
        out[0] = n * (u[0] + u[-1])
        out[1:] = rn * (u[1:] - u[:-1])
        return out

    def solve_T(self, w):
        # S^{-T} w
        w = np.asarray(w, dtype=float)
        n, rn = self.dim, self.rn
        out = np.empty_like(w)
        out[0] = n * w[0] - rn * w[1]
        out[1:-1] = rn * (w[1:-1] - w[2:])
        out[-1] = n * w[0] + rn * w[-1]
        return out

    def apply(self, v):
        # S v: increments fixed by rows 2..n, the level by the first row
        v = np.asarray(v, dtype=float)
        c = np.empty_like(v)
        c[0] = 0.0
        v[1:].cumsum(axis=0, out=c[1:])
        c[1:] /= self.rn
        c += 0.5 * (v[0] / self.dim - c[-1])
        return c

    def apply_T(self, w):
        # S^T w, i.e. solve (S^{-1})^T y = w
        w = np.asarray(w, dtype=float)
        n, rn = self.dim, self.rn
        inner = w[1:-1] / rn
        y2 = 0.5 * ((w[-1] - w[0]) / rn + inner.sum(axis=0))
        y = np.empty_like(w)
        y[1] = y2
        if n > 2:
            inner.cumsum(axis=0, out=y[2:])
            np.subtract(y2, y[2:], out=y[2:])
        y[0] = (w[0] + rn * y2) / n
        return y


def _interp_matrix(grid, points):
    """Rows of linear-interpolation weights from ``grid`` to ``points``."""
    W = np.zeros((len(points), len(grid)))
    h = grid[1] - grid[0]
    for k, x in enumerate(points):
        j = min(int(np.floor((x - grid[0]) / h + 1e-12)), len(grid) - 2)
        t = (x - grid[j]) / h
        if abs(t) < 1e-12:
            W[k, j] = 1.0
        elif abs(t - 1) < 1e-12:
            W[k, j + 1] = 1.0
        else:
            W[k, j] = 1 - t
            W[k, j + 1] = t
    return W


def default_source(x, amplitude=10.0, width=0.05, centers=(0.3, 0.7)):
    """Two opposite-sign Gaussian bumps."""
    a, b = centers
    return amplitude * (np.exp(-0.5 * ((x - a) / width) ** 2) - np.exp(-0.5 * ((x - b) / width) ** 2))


def default_true_kappa(x, base=1.0, height=2.0, center=0.6, width=0.15):
    """Smooth bump with values in [1, 3]."""
    return base + height * np.exp(-0.5 * ((x - center) / width) ** 2)


class _EllipticLinearization(Linearization):
    """Forward state at ``u``: factorised tridiagonal operator and potential."""

    def __init__(self, model, u):
        self.model = model
        self.x = u
        self.dkappa = model.kappa_scale * np.exp(u)
        kappa = self.dkappa + model.kappa_floor
        self.p, self.factors = model._solve(kappa)
        self.value = model.obs @ self.p
        self.delta = self.p[:-1] - self.p[1:]

    def jvp(self, du):
        m = self.model
        du = np.asarray(du, dtype=float)
        dk = self.dkappa[:, None] * du if du.ndim == 2 else self.dkappa * du
        dkf = 0.5 * (dk[:-1] + dk[1:])
        delta = self.delta[:, None] if du.ndim == 2 else self.delta
        t = delta * dkf
        # dR = B dkf ; B[k, k] = delta_k, B[k + 1, k] = -delta_k (row n-1 is Dirichlet)
        dR = t.copy()
        dR[1:] -= t[:-1]
        dp = -m._tri_solve(self.factors, dR)
        return m.obs_free @ dp

    def vjp(self, dy):
        m = self.model
        dy = np.asarray(dy, dtype=float)
        lam = m._tri_solve(self.factors, m.obs_free.T @ dy)
        # lam is zero at the Dirichlet node
        diff = lam.copy()
        diff[:-1] -= lam[1:]
        if dy.ndim == 2:
            half = (-0.5 * self.delta)[:, None] * diff
        else:
            half = -0.5 * self.delta * diff
        dk = np.empty((m.n,) + lam.shape[1:])
        dk[0] = half[0]
        dk[1:-1] = half[1:] + half[:-1]
        dk[-1] = half[-1]
        dk *= self.dkappa[:, None] if dy.ndim == 2 else self.dkappa
        return dk


class Elliptic1dModel(ForwardModel):
    """``-(kappa p')' = f`` on (0, 1), ``kappa(0) p'(0) = -1``, ``p(1) = 1``.

    Input is the log-diffusivity field ``u`` on ``n`` uniform nodes with
    ``kappa = 1.5 exp(u) + 0.1``; output is ``p`` at the observation points.
    Three-point finite differences with face values of ``kappa`` taken as
    the arithmetic mean of the neighbouring nodes; the Neumann row uses a
    half cell so the scheme stays second order and symmetric.
    """

    kappa_scale = 1.5
    kappa_floor = 0.1

    def __init__(self, n, source=default_source, obs_points=None):
        if n < 3:
            raise ValueError("need at least 3 grid nodes")
        self.n = int(n)
        self.x = np.linspace(0.0, 1.0, self.n)
        self.h = 1.0 / (self.n - 1)
        self.f = source(self.x)
        self.obs_points = np.linspace(0.1, 0.9, 9) if obs_points is None else np.asarray(obs_points, dtype=float)
        self.obs = _interp_matrix(self.x, self.obs_points)
        self.obs_free = self.obs[:, :-1]
        h = self.h
        self._rhs = h * h * self.f[:-1].copy()
        self._rhs[0] = 0.5 * h * h * self.f[0] + h

    def dims(self):
        return self.n, len(self.obs_points)

    def kappa(self, u):
        return self.kappa_scale * np.exp(u) + self.kappa_floor

    def _solve(self, kappa):
        # min/max are NaN-propagating, so one pair of reductions screens everything
        if not (kappa.min() > 0 and kappa.max() < np.inf):
            raise FactorizationError("diffusivity must be finite and positive")
        kf = 0.5 * (kappa[:-1] + kappa[1:])
        D = kf.copy()
        D[1:] += kf[:-1]
        b = self._rhs.copy()
        b[-1] += kf[-1]  # Dirichlet value p(1) = 1
        d, e, info = _dpttrf(D, -kf[:-1])
        if info != 0:
            raise FactorizationError(f"tridiagonal factorisation failed (info={info})")
        p = np.empty(self.n)
        p[:-1], info = _dpttrs(d, e, b)
        if info != 0:
            raise FactorizationError(f"tridiagonal solve failed (info={info})")
        p[-1] = 1.0
        return p, (d, e)

    def _tri_solve(self, factors, b):
        d, e = factors
        x, info = _dpttrs(d, e, b)
        if info != 0:
            raise FactorizationError(f"tridiagonal solve failed (info={info})")
        return x

    def potential(self, u):
        """Full potential field on the grid."""
        return self._solve(self.kappa(np.asarray(u, dtype=float)))[0]

    def potential_from_kappa(self, kappa):
        return self._solve(np.asarray(kappa, dtype=float))[0]

    def eval(self, u):
        return self.obs @ self.potential(u)

    def linearize(self, u):
        return _EllipticLinearization(self, np.asarray(u, dtype=float))

    def jvp(self, u, du):
        return self.linearize(u).jvp(du)

    def vjp(self, u, dy):
        return self.linearize(u).vjp(dy)


def elliptic_forward(model: Elliptic1dModel, u):
    """Observed potential for log-diffusivity ``u``."""
    return model.eval(u)


def elliptic_adjoint_vjp(model: Elliptic1dModel, u, dy):
    """``grad F(u)^T dy`` via one adjoint tridiagonal solve."""
    return model.vjp(u, dy)


@dataclass(frozen=True)
class EllipticConfig:
    """Synthetic-truth configuration, echoed into experiment outputs."""

    data_mesh: int = 151
    source_amplitude: float = 10.0
    source_width: float = 0.05
    source_centers: tuple = (0.3, 0.7)
    kappa_base: float = 1.0
    kappa_height: float = 2.0
    kappa_center: float = 0.6
    kappa_width: float = 0.15
    obs_points: tuple = field(default_factory=lambda: tuple(np.round(np.linspace(0.1, 0.9, 9), 12)))

    def source(self):
        amp, w, c = self.source_amplitude, self.source_width, self.source_centers
        return lambda x: default_source(x, amp, w, c)

    def true_kappa(self, x):
        return default_true_kappa(x, self.kappa_base, self.kappa_height, self.kappa_center, self.kappa_width)

    def to_dict(self):
        return {
            "data_mesh": self.data_mesh,
            "source_amplitude": self.source_amplitude,
            "source_width": self.source_width,
            "source_centers": list(self.source_centers),
            "kappa_base": self.kappa_base,
            "kappa_height": self.kappa_height,
            "kappa_center": self.kappa_center,
            "kappa_width": self.kappa_width,
            "obs_points": list(self.obs_points),
        }


def elliptic_noiseless_data(config: EllipticConfig = EllipticConfig()):
    model = Elliptic1dModel(config.data_mesh, source=config.source(), obs_points=config.obs_points)
    p = model.potential_from_kappa(config.true_kappa(model.x))
    return model.obs @ p


def elliptic_generate_data(sigma, seed, config: EllipticConfig = EllipticConfig()):
    """Synthetic observations from the truth solved on the data mesh."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    clean = elliptic_noiseless_data(config)
    noise = np.random.default_rng(seed).standard_normal(clean.size)
    return clean + sigma * noise


def elliptic_problem(n, sigma, seed=0, config: EllipticConfig = EllipticConfig(), data=None) -> BayesProblem:
    if n == config.data_mesh:
        raise ValueError("the inversion mesh must differ from the data mesh")
    model = Elliptic1dModel(n, source=config.source(), obs_points=config.obs_points)
    y = elliptic_generate_data(sigma, seed, config) if data is None else np.asarray(data, dtype=float)
    return BayesProblem(model, y, np.zeros(n), EllipticPriorFactor(n), ScaledIdentity(len(y), sigma))


def kappa_from_whitened(wp, v):
    """Diffusivity field for whitened parameters ``v`` (rows or a vector)."""
    model = wp.forward
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        return model.kappa(wp.prior_factor.apply(v) + wp.prior_mean)
    u = wp.prior_factor.apply(v.T).T + wp.prior_mean
    return model.kappa(u)
