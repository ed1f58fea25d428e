"""Conditional (post-instrument-selection) inference for linear IV models."""

__version__ = "0.1.0"

from .exceptions import (AllInvalid, BracketNotFound, DegenerateDenominator,
                         DegenerateWeights, InconsistentScale, IVCondError,
                         NegativeVariance, NoConvergence, StuckChain)
from .iv_core import (Grams, IVData, ModelParams, NaiveInterval,
                      ProjectionCache, ar_statistic, naive_interval,
                      read_ivdata_csv, sigma_hat, sigma_hat_plugin,
                      tsls_estimate, tsls_statistic)
from .sisvive import (RandomizationSpec, SelectionResult, TuningParams,
                      default_lambda, default_omega_scale, kkt_residual,
                      solve_randomized_sisvive)
from .cond_density import (DensitySpec, ar_statistic_from_intermediate,
                           build_density, log_density)
from .sampler import (ChainResult, SamplerConfig, SamplerState, run_chain,
                      update_coef, update_joint, update_t, update_u)
from .inference import (InferenceResult, conditional_inference,
                        conditional_pvalue, conditional_pvalue_at, pivot_at,
                        selective_interval)
from .summary_data import (GramSummary, SummaryData, read_summary_csv,
                           reconstruct_grams, summary_pipeline,
                           summary_sigma_hat)
from .sim_harness import (SimConfig, coverage_for_configs, coverage_study,
                          ecdf_study, generate)

__all__ = [name for name in dir() if not name.startswith("_")]
