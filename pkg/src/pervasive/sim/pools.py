"""Named worker-pool templates and the default scenario builder."""

from __future__ import annotations

from dataclasses import dataclass

from ..domain import (
    AvailabilityTrace,
    ContextMode,
    GpuModel,
    ScenarioConfig,
    TraceEvent,
    WorkerJoin,
    WorkerProfile,
)
from .calibration import GPU_CATALOG, REFERENCE_GPU, SLOW_GPU, TOTAL_INFERENCES, Calibration, load_constants

_YEARS = {name: year for name, year, _ in GPU_CATALOG}


def gpu(name: str, cal: Calibration | None = None) -> GpuModel:
    cal = cal or load_constants()
    return GpuModel(name, cal.gpu_speed[name], _YEARS.get(name, 0))


@dataclass(frozen=True)
class PoolTemplate:
    name: str
    groups: tuple[tuple[GpuModel, int], ...]

    def __post_init__(self) -> None:
        for model, count in self.groups:
            if count <= 0:
                raise ValueError(f"{self.name}: count for {model.model_name} must be > 0")

    @property
    def size(self) -> int:
        return sum(c for _, c in self.groups)

    def profiles(self, first_id: int = 0, join_time: int = 0) -> list[WorkerProfile]:
        out = []
        wid = first_id
        for model, count in self.groups:
            for _ in range(count):
                out.append(WorkerProfile(wid, model, join_time=join_time))
                wid += 1
        return out


def mixed_20(cal: Calibration | None = None) -> PoolTemplate:
    """Ten A10s (ids 0-9) and ten TITAN X Pascal (ids 10-19)."""
    cal = cal or load_constants()
    return PoolTemplate("mixed-20", ((gpu(REFERENCE_GPU, cal), 10), (gpu(SLOW_GPU, cal), 10)))


def site_cluster(cal: Calibration | None = None) -> PoolTemplate:
    """The eight major GPU models at their cluster counts."""
    cal = cal or load_constants()
    return PoolTemplate("site-cluster", tuple((gpu(n, cal), c) for n, _, c in GPU_CATALOG))


def single(name: str = REFERENCE_GPU, cal: Calibration | None = None, count: int = 1) -> PoolTemplate:
    return PoolTemplate(f"{count}x{name}", ((gpu(name, cal), count),))


def homogeneous(count: int, speed: float = 1.0) -> PoolTemplate:
    return PoolTemplate(f"{count}x{speed}", ((GpuModel(f"gpu-{speed}", speed), count),))


POOLS = {"mixed-20": mixed_20, "site-cluster": site_cluster, "single": single}


def static_trace(pool: PoolTemplate) -> AvailabilityTrace:
    return AvailabilityTrace(tuple(TraceEvent(0, WorkerJoin(p)) for p in pool.profiles()))


def default_scenario(
    mode: str | ContextMode,
    batch_size: int,
    cal: Calibration | None = None,
    trace: AvailabilityTrace | None = None,
    name: str | None = None,
    **overrides,
) -> ScenarioConfig:
    """150k inferences on the 20-GPU two-speed pool, 95% start threshold."""
    cal = cal or load_constants()
    mode = ContextMode(mode)
    if trace is None:
        trace = static_trace(mixed_20(cal))
    return ScenarioConfig(
        total_inferences=overrides.pop("total_inferences", TOTAL_INFERENCES),
        batch_size=batch_size,
        context_mode=mode,
        workload=overrides.pop("workload", cal.workload),
        trace=trace,
        name=name or f"{mode.value}_{batch_size}",
        **overrides,
    )
