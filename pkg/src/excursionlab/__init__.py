"""Efficient, nuisance-robust estimation of causal excursion effects in micro-randomized trials."""

__version__ = "0.1.0"

from .cee import CeeSpec, LinkKind
from .panel import DecisionPoint, Panel, Trajectory, validate_panel
from .estimators import Emee, Oracle, TwoStage, TwoStageCF, Wcls, diagnose_wa2, estimate

__all__ = [
    "CeeSpec", "DecisionPoint", "Emee", "LinkKind", "Oracle", "Panel", "Trajectory",
    "TwoStage", "TwoStageCF", "Wcls", "diagnose_wa2", "estimate", "validate_panel",
]
