"""Deterministic processor-sharing simulation of a backend cluster.

Servers execute their in-flight tasks under egalitarian processor sharing:
with k tasks on c cores, every task progresses at (core_speed / reference) *
min(1, c / k) single-core-seconds per second. Rates are piecewise constant
between events, so each server can track one cumulative progress value and a
task finishes when that value passes the task's admission progress plus its
work — no per-task bookkeeping on the hot path.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from typing import Optional

from . import core
from .core import (
    GET,
    BackendPool,
    HardwareProfile,
    MetricsRecord,
    Request,
    ServerSpec,
)
from .workload import Scenario, generate


@dataclass
class ServiceModel:
    """Task costs in single-core seconds at the reference clock speed.

    The defaults make a POST three times heavier than a GET; they are artifact
    parameters meant for tuning, not measurements.
    """

    base_cost_get: float = 0.05
    base_cost_post: float = 0.15
    reference_speed_ghz: float = 1.80
    network_latency_s: float = 0.0

    def __post_init__(self):
        if self.base_cost_get <= 0 or self.base_cost_post <= 0:
            raise ValueError("base costs must be > 0")
        if self.reference_speed_ghz <= 0:
            raise ValueError("reference_speed_ghz must be > 0")
        if self.network_latency_s < 0:
            raise ValueError("network_latency_s must be >= 0")

    def work_for(self, method: str) -> float:
        return self.base_cost_get if method == GET else self.base_cost_post


@dataclass(frozen=True)
class EnvironmentProfile:
    """A named set of backend hardware profiles."""

    name: str
    servers: tuple[HardwareProfile, ...]


def homogeneous_profile() -> EnvironmentProfile:
    return EnvironmentProfile(
        name="homogeneous",
        servers=tuple(
            HardwareProfile(cores=16, core_speed_ghz=1.80, ram_gb=32.0, label=f"app-{i}")
            for i in range(1, 6)
        ),
    )


def heterogeneous_profile() -> EnvironmentProfile:
    shapes = (
        (4, 16.0, "m5.xlarge"),
        (8, 32.0, "m5.2xlarge"),
        (16, 64.0, "m5.4xlarge"),
        (32, 128.0, "m5.8xlarge"),
        (48, 192.0, "m5.12xlarge"),
    )
    return EnvironmentProfile(
        name="heterogeneous",
        servers=tuple(
            HardwareProfile(cores=cores, core_speed_ghz=1.80, ram_gb=ram, label=label)
            for cores, ram, label in shapes
        ),
    )


ENVIRONMENTS = {
    "homogeneous": homogeneous_profile(),
    "heterogeneous": heterogeneous_profile(),
}


def build_pool(
    env: EnvironmentProfile,
    weights: Optional[list[int]] = None,
    maxconn: Optional[int | list[int]] = None,
) -> BackendPool:
    """Fresh pool over the environment's servers, ids assigned 1..n in order."""
    specs = []
    for i, profile in enumerate(env.servers):
        specs.append(
            ServerSpec(
                server_id=i + 1,
                name=profile.label or f"srv{i + 1}",
                weight=weights[i] if weights else 1,
                maxconn=maxconn[i] if isinstance(maxconn, list) else maxconn,
                profile=profile,
            )
        )
    return BackendPool(specs)


def service_rate(
    profile: HardwareProfile, concurrent_tasks: int, reference_speed_ghz: float = 1.80
) -> float:
    """Per-task work-rate multiplier under processor sharing."""
    if concurrent_tasks < 1:
        raise ValueError("concurrent_tasks must be >= 1")
    ratio = profile.core_speed_ghz / reference_speed_ghz
    cores = profile.cores
    return ratio * (1.0 if concurrent_tasks <= cores else cores / concurrent_tasks)


def cpu_utilization(profile: HardwareProfile, concurrent_tasks: int) -> float:
    """Fraction of cores busy; saturates at 1.0 once tasks reach the core count."""
    if concurrent_tasks >= profile.cores:
        return 1.0
    return concurrent_tasks / profile.cores


class _ServerSim:
    """Processor-sharing bookkeeping for one server inside the event loop."""

    __slots__ = (
        "server_id",
        "cores",
        "speed_ratio",
        "state",
        "progress",
        "last_t",
        "rate",
        "targets",
        "version",
    )

    def __init__(self, spec: ServerSpec, state, reference_speed_ghz: float):
        self.server_id = spec.server_id
        self.cores = spec.profile.cores
        self.speed_ratio = spec.profile.core_speed_ghz / reference_speed_ghz
        self.state = state
        self.progress = 0.0
        self.last_t = 0.0
        self.rate = 0.0
        # (finish_progress, request_id, arrival_time, deadline, method), completion order
        self.targets: list[tuple[float, int, float, float, str]] = []
        self.version = 0

    def advance(self, now: float) -> None:
        dt = now - self.last_t
        if dt > 0.0:
            self.progress += dt * self.rate
            self.last_t = now
        elif dt < 0.0:
            raise AssertionError("simulation clock moved backwards")
        else:
            self.last_t = now

    def retune(self) -> None:
        k = len(self.targets)
        if k == 0:
            self.rate = 0.0
            self.state.cpu_utilization = 0.0
        else:
            cores = self.cores
            self.rate = self.speed_ratio * (1.0 if k <= cores else cores / k)
            self.state.cpu_utilization = 1.0 if k >= cores else k / cores


def run_simulation(
    scenario: Scenario,
    pool: BackendPool,
    algorithm_config,
    service_model: Optional[ServiceModel] = None,
    requests: Optional[list[Request]] = None,
) -> list[MetricsRecord]:
    """Run the scenario through the dispatch engine and return one record per request.

    Each arrival goes through core.dispatch; each completion goes through
    core.release. Ties are processed completions-first, then by request id.
    The loop drains fully, so every dispatched request completes. Deterministic
    for fixed scenario and algorithm seeds.
    """
    model = service_model if service_model is not None else ServiceModel()
    if requests is None:
        requests = generate(scenario)
    sims = {
        spec.server_id: _ServerSim(spec, state, model.reference_speed_ghz)
        for spec, state in pool.servers
    }
    records: list[MetricsRecord] = []
    record = records.append
    heap: list[tuple[float, int, int, int]] = []  # (time, request_id, server_id, version)
    latency = model.network_latency_s
    cost_get = model.base_cost_get
    cost_post = model.base_cost_post
    dispatch = core.dispatch
    release = core.release
    push = heapq.heappush
    pop = heapq.heappop
    inf = float("inf")
    i = 0
    n = len(requests)
    next_arrival = requests[0].arrival_time if n else inf
    while i < n or heap:
        if heap and heap[0][0] <= next_arrival:
            t, rid, sid, version = pop(heap)
            sim = sims[sid]
            if version != sim.version:
                continue
            sim.advance(t)
            target, _, arrival, deadline, method = pop(sim.targets)
            if sim.progress < target:
                sim.progress = target  # absorb float drift at the boundary
            sim.version += 1
            sim.retune()
            if sim.targets:
                nxt = sim.targets[0]
                gap = nxt[0] - sim.progress
                eta = t + (gap if gap > 0.0 else 0.0) / sim.rate
                push(heap, (eta, nxt[1], sid, sim.version))
            release(sid, pool)
            response = (t - arrival) + latency
            record(MetricsRecord(rid, method, sid, arrival, response,
                                 response <= deadline, False))
        else:
            request = requests[i]
            i += 1
            next_arrival = requests[i].arrival_time if i < n else inf
            decision = dispatch(request, pool, algorithm_config)
            method = request.method
            now = request.arrival_time
            if decision.rejected:
                record(MetricsRecord(request.request_id, method, None, now, None, False, True))
                continue
            sim = sims[decision.chosen]
            sim.advance(now)
            work = cost_get if method == GET else cost_post
            push(sim.targets,
                 (sim.progress + work, request.request_id, now, request.deadline, method))
            sim.version += 1
            sim.retune()
            nxt = sim.targets[0]
            gap = nxt[0] - sim.progress
            eta = now + (gap if gap > 0.0 else 0.0) / sim.rate
            push(heap, (eta, nxt[1], sim.server_id, sim.version))
    records.sort(key=lambda r: r.request_id)
    return records
