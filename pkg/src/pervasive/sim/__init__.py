"""Discrete-event cluster simulator."""

from .engine import COMPLETED, STALLED, InvalidScenario, SimEngine, SimRun, run_scenario
from .traces import make_drain_trace, make_fluctuating_trace
from .workload import closed_form_makespan

__all__ = [
    "COMPLETED",
    "STALLED",
    "InvalidScenario",
    "SimEngine",
    "SimRun",
    "closed_form_makespan",
    "make_drain_trace",
    "make_fluctuating_trace",
    "run_scenario",
]
