import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def fd_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian, one column per input coordinate."""
    x = np.asarray(x, dtype=float)
    cols = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.column_stack(cols)


def quadrature_1d(wp, limit=8.0, points=20001):
    """Grid, normalised posterior density and cell width for a 1-D whitened problem."""
    g = np.linspace(-limit, limit, points)
    logt = np.array([-0.5 * x * x - 0.5 * float(np.sum(wp.G(np.array([x])) ** 2)) for x in g])
    dens = np.exp(logt - logt.max())
    h = g[1] - g[0]
    return g, dens / (dens.sum() * h), h


def quadrature_2d(wp, limit=6.0, points=601):
    """Grid coordinates and normalised posterior cell masses for a 2-D whitened problem."""
    g = np.linspace(-limit, limit, points)
    X1, X2 = np.meshgrid(g, g, indexing="ij")
    V = np.column_stack([X1.ravel(), X2.ravel()])
    logt = np.array([-0.5 * v @ v - 0.5 * float(np.sum(wp.G(v) ** 2)) for v in V])
    mass = np.exp(logt - logt.max())
    return V, mass / mass.sum()
