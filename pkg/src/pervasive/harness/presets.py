"""Named experiment presets: the pv0..pv6 ladder."""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..domain import ContextMode, FactoryPolicy, ScenarioConfig
from ..sim.calibration import REFERENCE_GPU, SLOW_GPU, Calibration, load_constants
from ..sim.pools import mixed_20, default_scenario, single, static_trace
from ..sim.traces import make_drain_trace, make_fluctuating_trace

SWEEP_BATCHES = (1, 100, 1000, 3000, 7500)
DRAIN_WARMUP_MIN = 15.0
DRAIN_RATE_PER_MIN = 1.0


@dataclass(frozen=True)
class Preset:
    name: str
    config: ScenarioConfig
    # drain presets lose the whole pool before finishing; Stalled is their expected end
    ends_drained: bool = False
    illustrative: bool = False
    description: str = ""


def batch_label(b: int) -> str:
    if b >= 1000:
        k = b / 1000
        return f"{k:g}k"
    return str(b)


def parse_batch(label: str) -> int:
    m = re.fullmatch(r"(\d+(?:\.\d+)?)(k?)", label.strip().lower())
    if not m:
        raise ValueError(f"bad batch size {label!r}")
    value = float(m.group(1)) * (1000 if m.group(2) else 1)
    if value != int(value) or value < 1:
        raise ValueError(f"bad batch size {label!r}")
    return int(value)


def _drain(cal: Calibration):
    return make_drain_trace(
        mixed_20(cal).profiles(), DRAIN_WARMUP_MIN, DRAIN_RATE_PER_MIN, ordering=[REFERENCE_GPU, SLOW_GPU]
    )


def _fluctuating(name: str, seed: int, lo: int, hi: int, cal: Calibration) -> Preset:
    trace = make_fluctuating_trace(seed, lo, hi, mean_dwell=10.0, horizon=240.0, cal=cal)
    cfg = default_scenario(
        ContextMode.PERVASIVE, 100, cal, trace=trace, name=name,
        factory=FactoryPolicy(min_workers=0, max_workers=hi), seed=seed,
    )
    return Preset(name, cfg, illustrative=True, description=f"illustrative churn, {lo}-{hi} GPUs from the cluster mix")


ILLUSTRATIVE = {"pv6_busy": (1, 11, 64), "pv6_quiet": (2, 100, 186)}


def resolve(name: str, cal: Calibration | None = None) -> Preset:
    """Build the preset called ``name`` (pv0, pv1, pv2, pv3_<B>, pv4_<B>, pv5p, pv5s, pv6_busy, pv6_quiet)."""
    cal = cal or load_constants()
    if name == "pv0":
        cfg = default_scenario(ContextMode.PERVASIVE, 100, cal, trace=static_trace(single(REFERENCE_GPU, cal)), name=name)
        return Preset(name, cfg, description="one A10, pervasive, B=100")
    if name == "pv1":
        return Preset(name, default_scenario(ContextMode.NAIVE, 100, cal, name=name), description="20 GPUs, no context reuse")
    if name == "pv2":
        return Preset(name, default_scenario(ContextMode.PARTIAL, 100, cal, name=name), description="20 GPUs, cached artifacts")
    if name == "pv5p":
        cfg = default_scenario(ContextMode.PARTIAL, 1000, cal, trace=_drain(cal), name=name)
        return Preset(name, cfg, ends_drained=True, description="partial B=1000 under a 1 GPU/min drain")
    if name == "pv5s":
        cfg = default_scenario(ContextMode.PERVASIVE, 100, cal, trace=_drain(cal), name=name)
        return Preset(name, cfg, ends_drained=True, description="pervasive B=100 under a 1 GPU/min drain")
    if name in ILLUSTRATIVE:
        return _fluctuating(name, *ILLUSTRATIVE[name], cal)
    m = re.fullmatch(r"pv([34])_(.+)", name)
    if m:
        mode = ContextMode.PARTIAL if m.group(1) == "3" else ContextMode.PERVASIVE
        b = parse_batch(m.group(2))
        return Preset(name, default_scenario(mode, b, cal, name=name), description=f"20 GPUs, {mode.value}, B={b}")
    raise KeyError(f"unknown preset {name!r}")


def ladder() -> list[str]:
    names = ["pv0", "pv1", "pv2"]
    names += [f"pv3_{batch_label(b)}" for b in SWEEP_BATCHES]
    names += [f"pv4_{batch_label(b)}" for b in SWEEP_BATCHES]
    names += ["pv5p", "pv5s", *ILLUSTRATIVE]
    return names
