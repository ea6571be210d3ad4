"""Delay-corrected adaptive experimentation for delayed binary feedback."""

from .bandit import (
    AssignmentPlan,
    BetaPosterior,
    GridConfig,
    PolicyKind,
    StoppingRule,
    assignment_probs_mc,
    check_stopping,
    update_beta_dts,
    update_beta_naive,
)
from .core import ClickEvent, ConversionEvent, ExperimentState, GroupStats, ObservationSnapshot
from .em import DEFAULT_PRIOR, EmConfig, GroupEstimate, delay_corrected_theta, run_em
from .simulator import RunConfig, Scenario, get_preset, replicate, run_experiment, scenario_presets

__version__ = "0.1.0"

__all__ = [
    "AssignmentPlan",
    "BetaPosterior",
    "ClickEvent",
    "ConversionEvent",
    "DEFAULT_PRIOR",
    "EmConfig",
    "ExperimentState",
    "GridConfig",
    "GroupEstimate",
    "GroupStats",
    "ObservationSnapshot",
    "PolicyKind",
    "RunConfig",
    "Scenario",
    "StoppingRule",
    "assignment_probs_mc",
    "check_stopping",
    "delay_corrected_theta",
    "get_preset",
    "replicate",
    "run_em",
    "run_experiment",
    "scenario_presets",
    "update_beta_dts",
    "update_beta_naive",
]
