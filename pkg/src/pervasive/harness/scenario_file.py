"""YAML scenario files.

Every key is optional; unset keys come from ``preset`` (if given) or from the
command-line flags::

    name: my-run
    preset: pv4_100            # start from a named preset
    context_mode: pervasive    # naive | partial | pervasive
    batch_size: 100
    total_inferences: 150000
    seed: 0
    transfer_cap: 3
    start_threshold: 0.95
    repetitions: 1
    pool: mixed-20             # mixed-20 | site-cluster | single
    trace: churn.csv           # replay a trace file instead of a static pool
    drain:                     # drain the pool after a warmup
      warmup_min: 15
      rate_per_min: 1
      ordering: [NVIDIA A10, NVIDIA TITAN X (Pascal)]
    factory:
      min_workers: 0
      max_workers: 64
      per_cycle: 10
      period_ms: 5000
    workload:                  # per-field overrides of the calibrated model
      t_model_load: 14.78

Relative ``trace`` paths resolve against the scenario file's directory.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path
from typing import Any

import yaml

from ..domain import ContextMode, FactoryPolicy, ScenarioConfig, WorkloadModel
from ..sim.calibration import Calibration, load_constants
from ..sim.pools import POOLS, static_trace
from ..sim.traces import make_drain_trace, read_trace_csv
from .presets import Preset, resolve

SCALAR_KEYS = {
    "name": str,
    "context_mode": ContextMode,
    "batch_size": int,
    "total_inferences": int,
    "seed": int,
    "transfer_cap": int,
    "start_threshold": float,
}
KNOWN_KEYS = set(SCALAR_KEYS) | {"preset", "repetitions", "pool", "trace", "drain", "factory", "workload"}


class ScenarioFileError(ValueError):
    pass


def build_scenario(
    spec: dict[str, Any],
    base: ScenarioConfig | None = None,
    cal: Calibration | None = None,
    root: Path | None = None,
) -> tuple[ScenarioConfig, bool]:
    """Apply ``spec`` on top of ``base``. Returns the config and whether it is a drain run."""
    unknown = set(spec) - KNOWN_KEYS
    if unknown:
        raise ScenarioFileError(f"unknown keys: {sorted(unknown)}")
    cal = cal or load_constants()
    drained = False
    if "preset" in spec:
        preset: Preset = resolve(spec["preset"], cal)
        base = preset.config
        drained = preset.ends_drained
    if base is None:
        base = resolve("pv4_100", cal).config
    changes: dict[str, Any] = {}
    for key, conv in SCALAR_KEYS.items():
        if key in spec:
            try:
                changes[key] = conv(spec[key])
            except ValueError as exc:
                raise ScenarioFileError(f"{key}: {exc}") from None
    if "workload" in spec:
        names = {f.name for f in fields(WorkloadModel)}
        bad = set(spec["workload"]) - names
        if bad:
            raise ScenarioFileError(f"unknown workload fields: {sorted(bad)}")
        changes["workload"] = replace(base.workload, **{k: float(v) for k, v in spec["workload"].items()})
    pool = None
    if "pool" in spec:
        if spec["pool"] not in POOLS:
            raise ScenarioFileError(f"unknown pool {spec['pool']!r}; choose from {sorted(POOLS)}")
        pool = POOLS[spec["pool"]](cal=cal)
        changes["trace"] = static_trace(pool)
    if "trace" in spec:
        path = Path(spec["trace"])
        if root is not None and not path.is_absolute():
            path = root / path
        changes["trace"] = read_trace_csv(path, cal)
    if "drain" in spec:
        d = spec["drain"] or {}
        profiles = (pool.profiles() if pool else (changes.get("trace") or base.trace).profiles())
        ordering = d.get("ordering", "speed-descending")
        changes["trace"] = make_drain_trace(profiles, float(d.get("warmup_min", 15)), float(d.get("rate_per_min", 1)), ordering)
        drained = True
    if "factory" in spec:
        changes["factory"] = FactoryPolicy(**{k: int(v) for k, v in (spec["factory"] or {}).items()})
    return replace(base, **changes), drained


def load_scenario_file(path: str | Path, base: ScenarioConfig | None = None, cal: Calibration | None = None):
    path = Path(path)
    spec = yaml.safe_load(path.read_text()) or {}
    if not isinstance(spec, dict):
        raise ScenarioFileError("scenario file must be a mapping")
    spec.setdefault("name", path.stem)
    cfg, drained = build_scenario(spec, base, cal, root=path.parent)
    return cfg, drained, int(spec.get("repetitions", 1))
