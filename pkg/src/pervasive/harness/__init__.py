"""Experiment harness: presets, runs, sweeps, scenario files and live mode."""

from .presets import Preset, ladder, resolve
from .runner import EXIT_INVALID, EXIT_OK, EXIT_STALLED, ExperimentPlan, compare, run, sweep_batch

__all__ = [
    "EXIT_INVALID",
    "EXIT_OK",
    "EXIT_STALLED",
    "ExperimentPlan",
    "Preset",
    "compare",
    "ladder",
    "resolve",
    "run",
    "sweep_batch",
]
