"""Profile-guided pass pipeline.

Inner loop: apply a pass, re-simulate to get a fresh memory profile, hand the
profile to the next pass.  Outer loop: after the pre-update passes, run a few
simulated training iterations so optimizer state becomes resident, profile
again, and only then run offloading.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Sequence

from .cost_model import ClusterConfig, CostModel
from .errors import ConfigError, OrderWarning, PassError
from .graph_ir import Graph, Schedule, initial_schedule
from .passes import (apply_offload_forward, apply_prefetch, apply_reload_backward, apply_sharding,
                     apply_unshard, gathered_params, select_unshard)
from .simulator import SimReport, simulate

log = logging.getLogger(__name__)

KNOWN_PASSES = ("shard", "prefetch", "unshard", "offload")
DEFAULT_WARMUP = 5


@dataclass
class StageReport:
    name: str
    graph: Graph
    schedule: Schedule
    report: SimReport


@dataclass
class PipelineResult:
    graph: Graph
    schedule: Schedule
    stages: list[StageReport]
    logs: dict[str, list[dict]] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    optimizer_resident: bool = False

    @property
    def final(self) -> SimReport:
        return self.stages[-1].report

    def stage(self, name: str) -> StageReport:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)


def check_pass_list(passes: Sequence[str]) -> list[str]:
    """Reject unknown or repeated passes; return order warnings."""
    passes = list(passes)
    unknown = [p for p in passes if p not in KNOWN_PASSES]
    if unknown:
        raise ConfigError(f"unknown passes {unknown}; choose from {', '.join(KNOWN_PASSES)}")
    if len(set(passes)) != len(passes):
        raise ConfigError(f"pass listed twice: {passes}")
    if "shard" in passes and passes[0] != "shard":
        raise ConfigError("shard must be the first pass")
    notes = []
    if "unshard" in passes and "prefetch" in passes and passes.index("unshard") < passes.index("prefetch"):
        notes.append("unshard before prefetch leaves little memory for prefetch buffers; "
                     "prefetch first is recommended")
    return notes


def run_pipeline(graph: Graph, cluster: ClusterConfig, cost: CostModel,
                 passes: Sequence[str] = ("shard", "prefetch", "unshard"),
                 warmup_iterations: int = DEFAULT_WARMUP, strict: bool = False,
                 schedule: Schedule | None = None) -> PipelineResult:
    notes = check_pass_list(passes)
    for msg in notes:
        warnings.warn(msg, OrderWarning, stacklevel=2)
    if warmup_iterations < 0:
        raise ConfigError("warmup_iterations must be >= 0")

    schedule = schedule or initial_schedule(graph)
    report = simulate(graph, schedule, cost, cluster)
    stages = [StageReport("initial", graph, schedule, report)]
    logs: dict[str, list[dict]] = {}
    notes = list(notes)

    def stage(name, fn):
        try:
            return fn()
        except PassError as exc:
            exc.stage = name
            raise

    for name in (p for p in passes if p != "offload"):
        profile = report.profile()
        if name == "shard":
            res = stage(name, lambda: apply_sharding(graph, schedule, cluster))
            graph, schedule = res.graph, res.schedule
            notes += res.warnings
        elif name == "prefetch":
            res = stage(name, lambda: apply_prefetch(graph, schedule, profile, cluster, cost, strict))
            graph, schedule = res.graph, res.schedule
            logs["prefetch"] = res.log
            notes += res.warnings
        elif name == "unshard":
            sel = stage(name, lambda: select_unshard(gathered_params(graph), profile, cluster, cost))
            graph, schedule = stage(name, lambda: apply_unshard(graph, schedule, sel.selected))
            logs["unshard"] = sel.log
        report = simulate(graph, schedule, cost, cluster)
        stages.append(StageReport(name, graph, schedule, report))
        log.info("stage %s: %d us, peak %d B", name, report.iteration_time_us, report.peak_memory_bytes)

    resident = False
    for _ in range(warmup_iterations):
        report = simulate(graph, schedule, cost, cluster, optimizer_resident=resident)
        # the first update allocates optimizer state; every later iteration carries it
        resident = bool(graph.fragments)
    if warmup_iterations:
        report = simulate(graph, schedule, cost, cluster, optimizer_resident=resident)
        stages.append(StageReport("warmup", graph, schedule, report))

    if "offload" in passes:
        profile = report.profile()
        fwd = stage("offload", lambda: apply_offload_forward(
            graph, schedule, profile, graph.fragments.values() if resident else (), cluster))
        mid = simulate(fwd.graph, fwd.schedule, cost, cluster, optimizer_resident=resident)
        bwd = stage("offload", lambda: apply_reload_backward(
            fwd.graph, fwd.schedule, mid.profile(), fwd.offloaded, cluster))
        graph, schedule = bwd.graph, bwd.schedule
        logs["offload"] = fwd.log + bwd.log
        notes += fwd.warnings + bwd.warnings
        report = simulate(graph, schedule, cost, cluster, optimizer_resident=resident)
        stages.append(StageReport("offload", graph, schedule, report))

    return PipelineResult(graph, schedule, stages, logs, notes, resident)
