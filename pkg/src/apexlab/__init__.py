"""Multi-objective group-relative policy optimization on a toy flow-matching policy.

Submodules:

* :mod:`apexlab.flowmatch`: time grid, SDE transitions, log-probabilities, analytic KL
* :mod:`apexlab.rewards`: heterogeneous synthetic rewards and utopia points
* :mod:`apexlab.dsan`: dual-stage advantage normalization
* :mod:`apexlab.scheduler`: priority-based objective weights
* :mod:`apexlab.grpo`: group rollouts, clipped surrogate, Adam, training step
* :mod:`apexlab.pareto`: domination, hypervolume, improvement indicators
* :mod:`apexlab.config`, :mod:`apexlab.harness`, :mod:`apexlab.cli`: runs and reports
"""
from __future__ import annotations

from .config import RunConfig, load_config, parse_config_text
from .dsan import dsan_advantages, naive_weight_then_normalize
from .errors import ApexError, ConfigError, ContractViolation, DomainError, InvariantFailure
from .flowmatch import Context, FlowPolicyParams, Mode, NoiseSchedule, TimeGrid
from .harness import compare, emit_plot_data, resume, run
from .pareto import dominates, hypervolume_exact, hypervolume_mc, pareto_filter, product_improvement_hv
from .rewards import RewardSpec, default_benchmark_specs

__version__ = "0.1.0"

__all__ = [
    "ApexError", "ConfigError", "Context", "ContractViolation", "DomainError", "FlowPolicyParams",
    "InvariantFailure", "Mode", "NoiseSchedule", "RewardSpec", "RunConfig", "TimeGrid", "compare",
    "default_benchmark_specs", "dominates", "dsan_advantages", "emit_plot_data",
    "hypervolume_exact", "hypervolume_mc", "load_config", "naive_weight_then_normalize",
    "pareto_filter", "parse_config_text", "product_improvement_hv", "resume", "run",
]
