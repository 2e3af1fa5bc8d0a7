"""Randomize-then-optimize sampling for Bayesian inverse problems."""

from .problem import BayesProblem, WhitenedProblem, whiten, unwhiten, log_target
from .optimizer import SolverOptions, solve_nlls
from .rto import (
    build_qr_basis,
    build_svd_basis,
    find_reference,
    generate_proposals,
    propose_scalable,
    propose_standard,
)
from .samplers import Chain, metropolize, normalize_weights, is_estimate, pcn_chain
from .diagnostics import ess, chain_stats, credible_band

__version__ = "0.1.0"
