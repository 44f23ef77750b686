"""Synthetic cost model standing in for LLM inference, plus its closed form."""

from __future__ import annotations

import math

from ..domain import ContextMode, DrainStart, ScenarioConfig, WorkerEvict, WorkerJoin, WorkloadModel


def to_ms(seconds: float) -> int:
    return int(round(seconds * 1000.0))


def stage_seconds(w: WorkloadModel, peer: bool = False) -> float:
    """Time to stage the dependency package and model onto one worker."""
    if peer:
        return (w.package_size + w.model_size) * w.t_peer_stage
    return w.package_size * w.t_software_stage + w.model_size * w.t_model_stage


def invocation_seconds(w: WorkloadModel, mode: ContextMode, batch: int, speed: float) -> float:
    compute = w.warm_dispatch_overhead + batch * w.t_inf_ref / speed
    if mode is ContextMode.PERVASIVE:
        return compute
    # partial and naive tasks load the model themselves
    return w.t_model_load + compute


class NotHomogeneous(ValueError):
    pass


def closed_form_makespan(config: ScenarioConfig) -> float:
    """Analytic makespan in seconds for a homogeneous, churn-free pool.

    Every worker joins at the first trace instant with the same speed and
    staging comes straight from the manager (transfer cap >= pool size).
    """
    joins = [e for e in config.trace.events if isinstance(e.action, WorkerJoin)]
    if not joins:
        raise NotHomogeneous("no workers")
    if any(isinstance(e.action, (WorkerEvict, DrainStart)) for e in config.trace.events):
        raise NotHomogeneous("trace has evictions")
    if len({e.time for e in joins}) != 1:
        raise NotHomogeneous("workers join at different times")
    speeds = {e.action.profile.gpu.speed_factor for e in joins}
    if len(speeds) != 1:
        raise NotHomogeneous(f"mixed speeds {sorted(speeds)}")
    if config.factory is not None:
        raise NotHomogeneous("factory-managed pool")
    w = config.workload
    speed = speeds.pop()
    workers = len(joins)
    if config.context_mode is not ContextMode.NAIVE and config.transfer_cap < workers:
        raise NotHomogeneous("transfer cap below pool size staggers staging")
    rounds = math.ceil(config.num_tasks / workers)
    per_task = w.warm_dispatch_overhead + config.batch_size * w.t_inf_ref / speed
    stage = stage_seconds(w)
    if config.context_mode is ContextMode.PERVASIVE:
        return stage + w.t_model_load + rounds * per_task
    if config.context_mode is ContextMode.PARTIAL:
        return stage + rounds * (w.t_model_load + per_task)
    return rounds * (stage + w.t_model_load + per_task)
