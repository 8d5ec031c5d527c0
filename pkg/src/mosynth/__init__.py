"""Synthetic control weights fitted jointly across several outcome series."""

from mosynth.conformal import NullSpec, avg_effect_interval, test_null, test_null_joint
from mosynth.panel import PanelData, PanelError, load_config, load_panel, prepare
from mosynth.simplex import BACKEND, QpProblem, WeightSolution, solve
from mosynth.weights import ObjectiveSpec, fit, gaps, heuristic_nu, imbalance

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "NullSpec",
    "ObjectiveSpec",
    "PanelData",
    "PanelError",
    "QpProblem",
    "WeightSolution",
    "avg_effect_interval",
    "fit",
    "gaps",
    "heuristic_nu",
    "imbalance",
    "load_config",
    "load_panel",
    "prepare",
    "solve",
    "test_null",
    "test_null_joint",
]
