"""Bayesian conditional tensor factorization classifier."""
from .model import (BctfPosterior, Hyper, Sample, collapsed_log_lik, eval_conditional,
                    format_selection, inclusion_probabilities, log_prior_k, modal_k, predict,
                    selection_report, threshold_map)
from .oracle import OracleResult, exact_posterior_oracle
from .sampler import (SamplerState, empirical_k_posterior, fit, gibbs_sweep, init_state,
                      update_k)

__all__ = [
    "BctfPosterior", "Hyper", "Sample", "collapsed_log_lik", "eval_conditional",
    "format_selection", "inclusion_probabilities", "log_prior_k", "modal_k", "predict",
    "selection_report", "threshold_map", "OracleResult", "exact_posterior_oracle",
    "SamplerState", "empirical_k_posterior", "fit", "gibbs_sweep", "init_state", "update_k",
]
