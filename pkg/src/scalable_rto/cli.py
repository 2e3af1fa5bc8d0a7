"""Experiment driver.

Each subcommand builds a problem from an :class:`ExperimentConfig`, runs a
sampler or a study, and writes CSV/JSON outputs plus ``config-echo.json``.
Configuration comes from an optional JSON file; command-line flags override
it.  Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .diagnostics import ChainStats, chain_stats, credible_band, ess
from .models import (
    EllipticConfig,
    elliptic_problem,
    kappa_from_whitened,
    linear_gaussian_problem,
    toy2d_problem,
    cubic1d_problem,
)
from .optimizer import SolverOptions
from .problem import WhitenedProblem, whiten
from .rto import (
    QrBasis,
    build_qr_basis,
    build_svd_basis,
    draw_reference_noise,
    find_reference_report,
    generate_proposals,
    proposal_log_density,
    weight_scalable,
    weight_standard,
)
from .samplers import (
    Chain,
    importance_samples,
    implicit_propose,
    implicit_setup,
    metropolize,
    pcn_chain,
    rml_importance_samples,
    rml_metropolize,
    rml_propose,
)

log = logging.getLogger("scalable_rto")

MODELS = ("elliptic", "toy2d", "linear", "cubic1d")
SAMPLERS = ("rto-scalable", "rto-standard", "pcn", "implicit", "rml", "importance")


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 1)."""


@dataclass
class ExperimentConfig:
    model: str = "elliptic"
    sampler: str = "rto-scalable"
    seed: int = 0
    workers: int = 1
    out: str = "out"
    # problem
    n: int = 41
    sigma: float = 1e-5
    data_seed: int = 0
    toy_y: list = field(default_factory=lambda: [0.5, 0.5])
    toy_sigma: float = 1.5
    linear_n: int = 20
    linear_m: int = 10
    # sampler
    steps: int = 2000
    tau: float = 1e-2
    ftol: float = 1e-6
    beta: Optional[float] = None
    rho: float = 0.95
    gamma: float = 0.05
    pcn_steps: int = 20000
    pcn_betas: list = field(default_factory=lambda: [0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005, 0.002, 0.001])
    pcn_pilot: int = 2000
    write_states: bool = True
    # studies
    dims: list = field(default_factory=lambda: [41, 81, 161, 321])
    sigmas: list = field(default_factory=lambda: [1e-4, 1e-2, 1.0])
    thresholds: list = field(default_factory=lambda: [10.0, 1.0, 0.1, 1e-2, 0.0])
    standard_proposals: int = 50
    grid_points: int = 121
    grid_limit: float = 6.0

    def validate(self):
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"unknown sampler {self.sampler!r}; choose from {', '.join(SAMPLERS)}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.seed < 0 or self.data_seed < 0:
            raise ConfigError("seeds must be non-negative")
        if self.steps < 1 or self.pcn_steps < 1:
            raise ConfigError("chain lengths must be positive")
        if self.n < 3:
            raise ConfigError("n must be at least 3")
        if self.model == "elliptic" and self.n == EllipticConfig().data_mesh:
            raise ConfigError("the data mesh size cannot be used for inversion")
        if self.sigma <= 0 or self.toy_sigma <= 0 or any(s <= 0 for s in self.sigmas):
            raise ConfigError("noise levels must be positive")
        if self.tau < 0 or any(t < 0 for t in self.thresholds):
            raise ConfigError("truncation thresholds must be non-negative")
        if self.beta is not None and not 0 < self.beta <= 1:
            raise ConfigError("beta must lie in (0, 1]")
        if any(not 0 < b <= 1 for b in self.pcn_betas):
            raise ConfigError("pcn_betas must lie in (0, 1]")
        if not 0 < self.rho < 1 or not 0 < self.gamma < 1:
            raise ConfigError("rho and gamma must lie in (0, 1)")
        if self.ftol <= 0:
            raise ConfigError("ftol must be positive")
        if list(self.dims) != sorted(self.dims):
            raise ConfigError("dims must be ascending")
        if list(self.thresholds) != sorted(self.thresholds, reverse=True):
            raise ConfigError("thresholds must be descending")
        if len(self.toy_y) != 2:
            raise ConfigError("toy_y needs two values")
        return self

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        return asdict(self)

    def solver(self):
        return SolverOptions(ftol=self.ftol)


# ---------------------------------------------------------------------------
# problems and samplers
# ---------------------------------------------------------------------------


def build_problem(cfg: ExperimentConfig, n=None, sigma=None):
    """Whitened problem plus a JSON-ready description of how it was built."""
    n = cfg.n if n is None else n
    sigma = cfg.sigma if sigma is None else sigma
    if cfg.model == "elliptic":
        truth = EllipticConfig()
        prob = elliptic_problem(n, sigma, cfg.data_seed, truth)
        info = dict(model="elliptic", n=n, sigma=sigma, data_seed=cfg.data_seed, truth=truth.to_dict(), y=prob.y.tolist())
    elif cfg.model == "toy2d":
        prob = toy2d_problem(tuple(cfg.toy_y), cfg.toy_sigma)
        info = dict(model="toy2d", y=list(cfg.toy_y), sigma=cfg.toy_sigma)
    elif cfg.model == "cubic1d":
        prob = cubic1d_problem()
        info = dict(model="cubic1d", y=prob.y.tolist())
    else:
        rng = np.random.default_rng(cfg.data_seed)
        A = rng.standard_normal((cfg.linear_m, cfg.linear_n)) / np.sqrt(cfg.linear_n)
        u_true = rng.standard_normal(cfg.linear_n)
        y = A @ u_true + sigma * rng.standard_normal(cfg.linear_m)
        prob = linear_gaussian_problem(A, y, noise_cov=sigma**2 * np.eye(cfg.linear_m))
        info = dict(model="linear", n=cfg.linear_n, m=cfg.linear_m, sigma=sigma, data_seed=cfg.data_seed)
    return whiten(prob), info


@dataclass
class RunResult:
    chain: Chain
    stats: ChainStats
    setup_seconds: float = 0.0
    rank: Optional[int] = None
    extra: dict = field(default_factory=dict)

    @property
    def cpu_seconds(self):
        return self.setup_seconds + sum(self.chain.timings.values())

    @property
    def cpu_per_proposal(self):
        return self.chain.timings.get("proposals", 0.0) / len(self.chain)

    @property
    def cpu_per_ess(self):
        return self.cpu_seconds / max(self.stats.median_ess, 1e-300)


def _rto_setup(wp, cfg, sampler, tau):
    t0 = time.process_time()
    v_ref, rep = find_reference_report(wp)
    if sampler == "rto-standard":
        basis = build_qr_basis(wp, v_ref)
        logw0 = weight_standard(wp, basis, v_ref)
    else:
        basis = build_svd_basis(wp, v_ref, tau)
        logw0 = weight_scalable(wp, basis, v_ref)
    return basis, v_ref, logw0, time.process_time() - t0


def run_rto(wp: WhitenedProblem, cfg: ExperimentConfig, sampler="rto-scalable", tau=None, steps=None) -> RunResult:
    tau = cfg.tau if tau is None else tau
    steps = cfg.steps if steps is None else steps
    basis, v_ref, logw0, setup = _rto_setup(wp, cfg, sampler, tau)
    props = generate_proposals(wp, basis, steps, cfg.seed, cfg.workers, cfg.solver())
    chain = metropolize(props, v_ref, logw0, cfg.seed)
    rank = wp.n if isinstance(basis, QrBasis) else basis.r
    return RunResult(chain, chain_stats(chain), setup, rank, {"proposals": props, "basis": basis})


def run_importance(wp, cfg) -> RunResult:
    basis, v_ref, logw0, setup = _rto_setup(wp, cfg, "rto-scalable", cfg.tau)
    props = generate_proposals(wp, basis, cfg.steps, cfg.seed, cfg.workers, cfg.solver())
    ws = importance_samples(props)
    chain = Chain(
        np.array([p.v for p in props]),
        [p.valid for p in props],
        [p.log_weight for p in props],
        cfg.seed,
        timings={"proposals": float(sum(p.seconds for p in props))},
        iterations=np.array([p.report.iterations if p.report else 0 for p in props]),
    )
    stats = chain_stats(chain)
    mean = ws.weights @ ws.samples
    extra = {"weights": ws.weights, "is_mean": mean.tolist(), "kish_ess": ws.ess}
    return RunResult(chain, stats, setup, basis.r, extra)


def tune_pcn(wp, betas, pilot_steps, v0, seed):
    """Pick the step size with the largest pilot ESS per step.

    Each pilot chain has its burn-in half removed before scoring.
    """
    best, best_score = None, -np.inf
    scores = {}
    for beta in betas:
        chain = pcn_chain(wp, beta, pilot_steps, v0, seed).discard(0.5)
        X = chain.states
        score = 0.0 if np.all(X == X[0]) else float(np.median([ess(X[:, j]) for j in range(X.shape[1])]))
        scores[beta] = (chain.acceptance_rate, score)
        if score > best_score:
            best, best_score = beta, score
    return best, scores


def run_pcn(wp, cfg, beta=None) -> RunResult:
    t0 = time.process_time()
    v0, _ = find_reference_report(wp)
    setup = time.process_time() - t0
    tuning = {}
    if beta is None:
        beta = cfg.beta
    if beta is None:
        # step-size search stands in for manual tuning and is not charged to the run
        beta, tuning = tune_pcn(wp, cfg.pcn_betas, cfg.pcn_pilot, v0, cfg.seed + 1)
    full = pcn_chain(wp, beta, cfg.pcn_steps, v0, cfg.seed)
    chain = full.discard(0.5)
    stats = chain_stats(chain)
    # the burn-in half is part of the cost
    chain.timings = dict(full.timings)
    converged = chain.acceptance_rate >= 0.01 and stats.median_ess >= 10 and not stats.degenerate
    extra = {"beta": beta, "tuning": {str(k): v for k, v in tuning.items()}, "converged": converged}
    return RunResult(chain, stats, setup, None, extra)


def run_implicit(wp, cfg) -> RunResult:
    t0 = time.process_time()
    v_map, _ = find_reference_report(wp)
    ell, grad, ell_min, L = implicit_setup(wp, v_map)
    setup = time.process_time() - t0
    noise = draw_reference_noise(cfg.seed, cfg.steps, wp.n)
    props = [implicit_propose(ell, v_map, L, xi, grad, ell_min) for xi in noise]
    logw0 = implicit_propose(ell, v_map, L, np.zeros(wp.n), grad, ell_min).log_weight
    chain = metropolize(props, v_map, logw0, cfg.seed)
    return RunResult(chain, chain_stats(chain), setup)


def run_rml(wp, cfg) -> RunResult:
    t0 = time.process_time()
    noise = draw_reference_noise(cfg.seed, cfg.steps, wp.n + wp.m)
    props = [rml_propose(wp, cfg.rho, row[: wp.n], row[wp.n :]) for row in noise]
    gen = time.process_time() - t0
    chain = rml_metropolize(wp, cfg.gamma, cfg.rho, props, cfg.seed)
    chain.timings["proposals"] = gen
    # report the parameter part only
    vchain = Chain(chain.states[:, : wp.n], chain.accepted, chain.log_weights, chain.seed, chain.timings, chain.costs, chain.iterations)
    ws = rml_importance_samples(wp, cfg.gamma, props)
    return RunResult(vchain, chain_stats(vchain), 0.0, None, {"is_mean": (ws.weights @ ws.samples).tolist()})


def run_sampler(wp, cfg, sampler=None) -> RunResult:
    sampler = cfg.sampler if sampler is None else sampler
    if sampler in ("rto-scalable", "rto-standard"):
        return run_rto(wp, cfg, sampler)
    if sampler == "importance":
        return run_importance(wp, cfg)
    if sampler == "pcn":
        return run_pcn(wp, cfg)
    if sampler == "implicit":
        return run_implicit(wp, cfg)
    return run_rml(wp, cfg)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            if len(row) != len(header):
                raise ValueError("row width does not match the header")
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])


def write_chain(path, chain: Chain, with_states=True):
    header = ["step", "accepted", "log_weight"]
    if with_states:
        header += [f"v{j}" for j in range(chain.states.shape[1])]
    rows = []
    for k in range(len(chain)):
        row = [k, int(chain.accepted[k]), float(chain.log_weights[k])]
        if with_states:
            row += [float(x) for x in chain.states[k]]
        rows.append(row)
    write_csv(path, header, rows)


def echo_config(out: Path, cfg: ExperimentConfig, command: str, extra=None):
    payload = {"command": command, "version": __version__, "config": cfg.to_dict()}
    if extra:
        payload.update(extra)
    write_json(out / "config-echo.json", payload)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_sample(cfg: ExperimentConfig) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    wp, info = build_problem(cfg)
    echo_config(out, cfg, "sample", {"problem": info})
    res = run_sampler(wp, cfg)
    stats = res.stats.to_dict()
    stats.update(sampler=cfg.sampler, setup_seconds=res.setup_seconds, cpu_seconds=res.cpu_seconds, rank=res.rank)
    for key in ("beta", "converged", "is_mean", "kish_ess", "tuning"):
        if key in res.extra:
            stats[key] = res.extra[key]
    if cfg.model == "elliptic":
        lo, hi = credible_band(res.chain, 0.9, lambda v: kappa_from_whitened(wp, v))
        stats["kappa_band_90"] = {"lower": lo.tolist(), "upper": hi.tolist()}
    write_json(out / "stats.json", stats)
    write_chain(out / "chain.csv", res.chain, cfg.write_states)
    log.info("acceptance %.3f, median ESS %.1f", res.stats.acceptance_rate, res.stats.median_ess)
    return 0


def _forward_seconds(wp, reps=200):
    v = np.zeros(wp.n)
    t0 = time.process_time()
    for _ in range(reps):
        wp.G(v)
    return (time.process_time() - t0) / reps


def _per_proposal(props):
    secs = float(np.mean([p.seconds for p in props]))
    evals = float(np.mean([p.report.residual_evals + p.weight_evals for p in props]))
    iters = float(np.mean([p.report.iterations for p in props]))
    return secs, evals, iters


DIM_HEADER = [
    "n",
    "rank",
    "acceptance",
    "median_ess",
    "ess_fraction",
    "mean_iterations",
    "cpu_per_proposal",
    "cpu_per_ess",
    "forward_evals_per_proposal",
    "cpu_per_forward_eval",
    "standard_cpu_per_proposal",
    "standard_forward_evals_per_proposal",
    "standard_iterations",
]


def dim_study(cfg: ExperimentConfig):
    rows = []
    for n in cfg.dims:
        wp, _ = build_problem(cfg, n=n)
        res = run_rto(wp, cfg, "rto-scalable")
        props = res.extra["proposals"]
        secs, evals, _ = _per_proposal(props)
        std = [float("nan")] * 3
        if cfg.standard_proposals > 0:
            v_ref = res.extra["basis"].v_ref
            qb = build_qr_basis(wp, v_ref)
            sp = generate_proposals(wp, qb, cfg.standard_proposals, cfg.seed, 1, cfg.solver())
            std = list(_per_proposal(sp))
        st = res.stats
        rows.append(
            [n, res.rank, st.acceptance_rate, st.median_ess, st.ess_fraction, st.mean_iterations, secs, res.cpu_per_ess, evals, _forward_seconds(wp)]
            + std
        )
        log.info("n=%d acceptance %.3f ESS/N %.3f", n, st.acceptance_rate, st.ess_fraction)
    return DIM_HEADER, rows


NOISE_HEADER = ["sigma", "rank", "acceptance", "median_ess", "ess_fraction", "mean_iterations", "cpu_per_proposal", "cpu_per_ess"]


def noise_study(cfg: ExperimentConfig):
    rows = []
    for sigma in cfg.sigmas:
        wp, _ = build_problem(cfg, sigma=sigma)
        res = run_rto(wp, cfg, "rto-scalable")
        st = res.stats
        rows.append([sigma, res.rank, st.acceptance_rate, st.median_ess, st.ess_fraction, st.mean_iterations, res.cpu_per_proposal, res.cpu_per_ess])
        log.info("sigma=%g acceptance %.3f iterations %.2f", sigma, st.acceptance_rate, st.mean_iterations)
    return NOISE_HEADER, rows


PCN_HEADER = ["sigma", "sampler", "beta", "acceptance", "median_ess", "cpu_seconds", "cpu_per_ess", "converged"]


def compare_pcn(cfg: ExperimentConfig):
    rows = []
    for sigma in cfg.sigmas:
        wp, _ = build_problem(cfg, sigma=sigma)
        rto = run_rto(wp, cfg, "rto-scalable")
        ok = rto.stats.acceptance_rate > 0 and not rto.stats.degenerate
        rows.append([sigma, "rto", float("nan"), rto.stats.acceptance_rate, rto.stats.median_ess, rto.cpu_seconds, rto.cpu_per_ess, int(ok)])
        pcn = run_pcn(wp, cfg)
        st = pcn.stats
        rows.append([sigma, "pcn", pcn.extra["beta"], st.acceptance_rate, st.median_ess, pcn.cpu_seconds, pcn.cpu_per_ess, int(pcn.extra["converged"])])
        log.info("sigma=%g rto %.3g s/ESS, pcn %.3g s/ESS", sigma, rto.cpu_per_ess, pcn.cpu_per_ess)
    return PCN_HEADER, rows


TRUNC_HEADER = ["tau", "rank", "acceptance", "median_ess", "ess_fraction", "mean_iterations", "proposal_mass", "degenerate"]


def density_grid(wp, basis, limit, points):
    """Prior, normalised target and proposal densities on a square grid."""
    g = np.linspace(-limit, limit, points)
    X1, X2 = np.meshgrid(g, g, indexing="ij")
    V = np.column_stack([X1.ravel(), X2.ravel()])
    cell = (g[1] - g[0]) ** 2
    prior = np.exp(-0.5 * np.sum(V**2, axis=1)) / (2 * np.pi)
    logt = np.array([-0.5 * v @ v - 0.5 * np.sum(wp.G(v) ** 2) for v in V])
    target = np.exp(logt - logt.max())
    target /= target.sum() * cell
    prop = None if basis is None else np.exp([proposal_log_density(wp, basis, v) for v in V])
    return V, prior, target, prop, cell


def truncation_study(cfg: ExperimentConfig):
    """Per-threshold rank, acceptance and ESS, plus density grids for 2-D models.

    The first row (``tau = -1``) is the untruncated standard path.  A chain
    that never moves reports ESS equal to its length, so ``degenerate``
    marks it.
    """
    wp, _ = build_problem(cfg)
    rows, grids = [], {}
    std = run_rto(wp, cfg, "rto-standard")
    st = std.stats
    mass = float("nan")
    if wp.n == 2:
        V, prior, target, prop, cell = density_grid(wp, std.extra["basis"], cfg.grid_limit, cfg.grid_points)
        grids.update(v1=V[:, 0], v2=V[:, 1], prior=prior, target=target, q_standard=prop)
        mass = float(prop.sum() * cell)
    rows.append([-1.0, std.rank, st.acceptance_rate, st.median_ess, st.ess_fraction, st.mean_iterations, mass, int(st.degenerate)])
    for tau in cfg.thresholds:
        res = run_rto(wp, cfg, "rto-scalable", tau=tau)
        st = res.stats
        mass = float("nan")
        if wp.n == 2:
            _, _, _, prop, cell = density_grid(wp, res.extra["basis"], cfg.grid_limit, cfg.grid_points)
            grids[f"q_tau_{tau:g}"] = prop
            mass = float(prop.sum() * cell)
        rows.append([tau, res.rank, st.acceptance_rate, st.median_ess, st.ess_fraction, st.mean_iterations, mass, int(st.degenerate)])
        log.info("tau=%g rank %d ESS/N %.3f", tau, res.rank, st.ess_fraction)
    return TRUNC_HEADER, rows, grids


def _run_study(cfg, command, fn, filename):
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    echo_config(out, cfg, command)
    result = fn(cfg)
    header, rows = result[0], result[1]
    write_csv(out / filename, header, rows)
    if len(result) > 2 and result[2]:
        grids = result[2]
        names = list(grids)
        write_csv(out / "density_grid.csv", names, zip(*[grids[k] for k in names]))
    return 0


COMMANDS = {
    "sample": cmd_sample,
    "dim-study": lambda cfg: _run_study(cfg, "dim-study", dim_study, "cpu_vs_dim.csv"),
    "noise-study": lambda cfg: _run_study(cfg, "noise-study", noise_study, "cpu_vs_obs.csv"),
    "compare-pcn": lambda cfg: _run_study(cfg, "compare-pcn", compare_pcn, "rto_vs_pcn.csv"),
    "truncation-study": lambda cfg: _run_study(cfg, "truncation-study", truncation_study, "truncation.csv"),
}


def _float_list(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text):
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser():
    parser = argparse.ArgumentParser(prog="scalable-rto", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON file with ExperimentConfig fields")
        p.add_argument("--seed", type=int)
        p.add_argument("--workers", type=int)
        p.add_argument("--out")
        p.add_argument("--model")
        p.add_argument("--sampler")
        p.add_argument("--n", type=int)
        p.add_argument("--sigma", type=float)
        p.add_argument("--steps", type=int)
        p.add_argument("--tau", type=float)
        p.add_argument("--beta", type=float)
        p.add_argument("--dims", type=_int_list)
        p.add_argument("--sigmas", type=_float_list)
        p.add_argument("--thresholds", type=_float_list)
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


OVERRIDES = ("seed", "workers", "out", "model", "sampler", "n", "sigma", "steps", "tau", "beta", "dims", "sigmas", "thresholds")


def load_config(args) -> ExperimentConfig:
    data = {}
    if args.config is not None:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
    for key in OVERRIDES:
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    return ExperimentConfig.from_dict(data).validate()


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any failure during a run maps to exit code 2
        print(f"run failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
