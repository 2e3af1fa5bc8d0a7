"""Chain quality metrics: effective sample size, acceptance, moments and
credible bands, plus the cost counters carried by a chain."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from .samplers import Chain

__all__ = ["autocorrelation", "ess", "is_degenerate", "ChainStats", "chain_stats", "credible_band"]


def autocorrelation(x):
    """Normalised autocorrelation of a 1-D series at every lag, via FFT."""
    x = np.asarray(x, dtype=float)
    N = x.size
    xc = x - x.mean()
    size = 1 << (2 * N - 1).bit_length()
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:N] / N
    if acov[0] == 0:
        return np.ones(N)
    return acov / acov[0]


def is_degenerate(series) -> bool:
    """True for a series that never moves."""
    x = np.asarray(series, dtype=float)
    return bool(x.size == 0 or np.all(x == x[0]))


def ess(series) -> float:
    """Effective sample size by Geyer's initial monotone sequence.

    Autocorrelations are summed in adjacent pairs while the pair sums stay
    positive, and each pair sum is capped at the previous one.  The result
    is clipped to ``[1, N]``; a constant series returns ``N`` by convention
    (use :func:`is_degenerate` to detect it).
    """
    x = np.asarray(series, dtype=float)
    N = x.size
    if N < 10:
        raise ValueError("need at least 10 values")
    if is_degenerate(x):
        return float(N)
    rho = autocorrelation(x)
    n_pairs = N // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.flatnonzero(pairs <= 0)
    pairs = pairs[: neg[0]] if neg.size else pairs
    pairs = np.minimum.accumulate(pairs)
    tau = -1.0 + 2.0 * pairs.sum()
    return float(np.clip(N / tau, 1.0, N)) if tau > 0 else float(N)


@dataclass
class ChainStats:
    steps: int
    acceptance_rate: float
    ess: list
    median_ess: float
    mean: list
    variance: list
    q05: list
    q95: list
    degenerate: bool
    mean_iterations: float
    forward_evals: int = 0
    jvp_evals: int = 0
    vjp_evals: int = 0
    optimizer_iterations: int = 0
    invalid_proposals: int = 0
    timings: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def ess_fraction(self):
        return self.median_ess / self.steps

    def to_dict(self):
        d = asdict(self)
        d["ess_fraction"] = self.ess_fraction
        return d


def chain_stats(chain: Chain, coords: Optional[np.ndarray] = None) -> ChainStats:
    """Aggregate a chain.  ``coords`` optionally replaces the raw states
    (e.g. a transformed field) for the moment and ESS columns."""
    if len(chain) == 0:
        raise ValueError("empty chain")
    X = chain.states if coords is None else np.asarray(coords, dtype=float)
    if len(chain) >= 10:
        per = [ess(X[:, j]) for j in range(X.shape[1])]
    else:
        per = [float(len(chain))] * X.shape[1]
    costs = chain.costs
    warnings = []
    props = costs.get("proposals", 0)
    if props and costs.get("invalid", 0) > 0.5 * props:
        warnings.append(f"{costs['invalid']} of {props} proposals failed")
    degenerate = bool(np.all(X == X[0]))
    if degenerate:
        warnings.append("chain never moved")
    iters = chain.iterations
    return ChainStats(
        steps=len(chain),
        acceptance_rate=chain.acceptance_rate,
        ess=per,
        median_ess=float(np.median(per)),
        mean=X.mean(axis=0).tolist(),
        variance=X.var(axis=0).tolist(),
        q05=np.quantile(X, 0.05, axis=0).tolist(),
        q95=np.quantile(X, 0.95, axis=0).tolist(),
        degenerate=degenerate,
        mean_iterations=float(np.mean(iters)) if iters is not None and len(iters) else 0.0,
        forward_evals=int(costs.get("forward_evals", 0)),
        jvp_evals=int(costs.get("jvp_evals", 0)),
        vjp_evals=int(costs.get("vjp_evals", 0)),
        optimizer_iterations=int(costs.get("optimizer_iterations", 0)),
        invalid_proposals=int(costs.get("invalid", 0)),
        timings=dict(chain.timings),
        warnings=warnings,
    )


def credible_band(chain: Chain, level: float = 0.9, transform: Optional[Callable] = None):
    """Equal-tailed per-coordinate band ``(lower, upper)`` at ``level``.

    ``transform`` maps each whitened state to the reported quantity, e.g.
    unwhitening followed by the diffusion-coefficient map.
    """
    if not 0 < level <= 1:
        raise ValueError("level must lie in (0, 1]")
    X = chain.states if transform is None else np.array([transform(v) for v in chain.states])
    a = 0.5 * (1.0 - level)
    return np.quantile(X, a, axis=0), np.quantile(X, 1.0 - a, axis=0)
