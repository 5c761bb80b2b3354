"""Deterministic execution and memory simulator; also serves as the profiler.

Execution model
---------------
A single host thread walks the schedule and issues each node to one of three
FIFO streams (compute, collective, host transfer).  A node starts at the
latest of: the host issue time, its stream becoming free, and the end of all
of its dependencies.  ``Release`` and ``TransferSync`` block the host until
they complete, so nodes scheduled after them cannot be issued earlier.  This
is what makes an unprefetched sharded schedule serialize gather and compute.

Memory is accounted in issue order, the way a caching allocator observes it:
``P_mem(o)`` is the resident byte count when ``o`` is issued.  Timing never
feeds back into memory, so a profile depends only on the schedule order.

All times are integer microseconds.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

from .cost_model import ClusterConfig, CostModel
from .errors import ProfileMismatch
from .graph_ir import Graph, NodeKind, Schedule, validate

COMPUTE_STREAM = "compute"
COLLECTIVE_STREAM = "collective"
TRANSFER_STREAM = "transfer"

STREAM_OF = {
    NodeKind.COMPUTE: COMPUTE_STREAM,
    NodeKind.OPTIMIZER_STEP: COMPUTE_STREAM,
    NodeKind.MARKER: COMPUTE_STREAM,
    NodeKind.RELEASE: COMPUTE_STREAM,
    NodeKind.TRANSFER_SYNC: COMPUTE_STREAM,
    NodeKind.ALLGATHER: COLLECTIVE_STREAM,
    NodeKind.REDUCE_SCATTER: COLLECTIVE_STREAM,
    NodeKind.OFFLOAD_START: TRANSFER_STREAM,
    NodeKind.RELOAD_START: TRANSFER_STREAM,
}
BLOCKING_KINDS = {NodeKind.RELEASE, NodeKind.TRANSFER_SYNC}


@dataclass(frozen=True)
class TimelineEvent:
    node_id: int
    kind: str
    stream: str
    start_us: int
    end_us: int


@dataclass(frozen=True)
class MemoryProfile:
    """Resident bytes before each node of the profiled schedule."""

    before: Mapping[int, int]
    peak_bytes: int
    # optimizer-state bytes resident at iteration start and included in ``before``
    optimizer_bytes: int = 0
    # bytes a node adds only while it runs (own allocation + transient)
    transient: Mapping[int, int] = field(default_factory=dict)

    def during(self, node_id: int) -> int:
        return self[node_id] + self.transient.get(node_id, 0)

    def __getitem__(self, node_id: int) -> int:
        try:
            return self.before[node_id]
        except KeyError:
            raise ProfileMismatch(node_id) from None

    def covers(self, schedule: Schedule) -> None:
        for nid in schedule.order:
            if nid not in self.before:
                raise ProfileMismatch(nid)


@dataclass(frozen=True)
class SimReport:
    iteration_time_us: int
    peak_memory_bytes: int
    initial_memory_bytes: int
    final_memory_bytes: int
    events: tuple
    memory_trace: tuple
    total_collective_bytes: int
    gather_count: int
    gathered_bytes: int
    overlap_fraction: float
    optimizer_resident: bool
    optimizer_bytes: int = 0
    overflows: tuple = ()
    p_mem: Mapping[int, int] = field(default_factory=dict, repr=False)
    transient: Mapping[int, int] = field(default_factory=dict, repr=False)

    def profile(self) -> MemoryProfile:
        return MemoryProfile(self.p_mem, self.peak_memory_bytes, self.optimizer_bytes, self.transient)

    def summary(self) -> dict:
        return {
            "iteration_time_us": self.iteration_time_us,
            "peak_memory_bytes": self.peak_memory_bytes,
            "initial_memory_bytes": self.initial_memory_bytes,
            "final_memory_bytes": self.final_memory_bytes,
            "total_collective_bytes": self.total_collective_bytes,
            "gather_count": self.gather_count,
            "gathered_bytes": self.gathered_bytes,
            "overlap_fraction": round(self.overlap_fraction, 6),
            "optimizer_resident": self.optimizer_resident,
            "memory_overflow_nodes": list(self.overflows),
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["events"] = [[e.node_id, e.kind, e.stream, e.start_us, e.end_us] for e in self.events]
        d["memory_trace"] = [list(p) for p in self.memory_trace]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    def timeline_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node_id", "kind", "stream", "start_us", "end_us"])
        for e in self.events:
            w.writerow([e.node_id, e.kind, e.stream, e.start_us, e.end_us])
        return buf.getvalue()

    def memory_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time_us", "resident_bytes"])
        w.writerows(self.memory_trace)
        return buf.getvalue()


def node_duration(graph: Graph, node_id: int, cost: CostModel) -> int:
    n = graph[node_id]
    if n.kind in (NodeKind.COMPUTE, NodeKind.OPTIMIZER_STEP):
        return n.duration_us
    if n.kind is NodeKind.ALLGATHER:
        return cost.comm_time_us(graph.gather_bytes(node_id))
    if n.kind is NodeKind.REDUCE_SCATTER:
        return cost.comm_time_us(graph.parameters[n.refs[0]].size_bytes)
    if n.kind in (NodeKind.OFFLOAD_START, NodeKind.RELOAD_START):
        return cost.transfer_time_us(graph.fragments[n.refs[0]].size_bytes)
    return 0


def initial_residency(graph: Graph, optimizer_resident: bool) -> int:
    total = sum(p.shard_bytes for p in graph.parameters.values())
    if optimizer_resident:
        total += sum(f.size_bytes for f in graph.fragments.values())
    return total


def _overlap(intervals: list[tuple[int, int]], busy: list[tuple[int, int]]) -> int:
    """Total length of ``intervals`` covered by ``busy`` (both sorted, disjoint)."""
    total = 0
    j = 0
    for s, e in intervals:
        while j < len(busy) and busy[j][1] <= s:
            j += 1
        k = j
        while k < len(busy) and busy[k][0] < e:
            total += max(0, min(e, busy[k][1]) - max(s, busy[k][0]))
            k += 1
    return total


def simulate(graph: Graph, schedule: Schedule, cost: CostModel, cluster: ClusterConfig,
             optimizer_resident: bool = False) -> SimReport:
    violations = validate(graph, schedule)
    if violations:
        raise ValueError(f"cannot simulate invalid schedule: {violations[0]}")

    ready = {COMPUTE_STREAM: 0, COLLECTIVE_STREAM: 0, TRANSFER_STREAM: 0}
    end: dict[int, int] = {}
    host = 0
    events = []

    init = initial_residency(graph, optimizer_resident)
    cur = peak = init
    capacity = cluster.capacity_bytes
    p_mem: dict[int, int] = {}
    transient: dict[int, int] = {}
    trace = [(0, init)]
    overflows = []
    gather_count = gathered = collective_bytes = 0

    for nid in schedule.order:
        n = graph[nid]
        stream = STREAM_OF[n.kind]
        dur = node_duration(graph, nid, cost)
        issue = host
        start = max([issue, ready[stream]] + [end[d] for d in n.deps])
        fin = start + dur
        ready[stream] = fin
        end[nid] = fin
        if n.kind in BLOCKING_KINDS:
            host = fin
        events.append(TimelineEvent(nid, n.kind.value, stream, start, fin))

        p_mem[nid] = cur
        alloc = 0
        if n.kind is NodeKind.ALLGATHER:
            alloc = graph.gather_bytes(nid)
            gather_count += 1
            gathered += alloc
            collective_bytes += alloc
        elif n.kind is NodeKind.REDUCE_SCATTER:
            collective_bytes += graph.parameters[n.refs[0]].size_bytes
        elif n.kind is NodeKind.RELOAD_START:
            alloc = graph.fragments[n.refs[0]].size_bytes
        during = cur + alloc + n.transient_bytes
        transient[nid] = alloc + n.transient_bytes
        peak = max(peak, during)
        if during > capacity:
            overflows.append(nid)
        cur = cur + alloc + n.persistent_delta_bytes
        if n.kind is NodeKind.RELEASE:
            cur -= graph.parameters[n.refs[0]].size_bytes
        elif n.kind is NodeKind.TRANSFER_SYNC and n.label == "offload":
            cur -= graph.fragments[n.refs[0]].size_bytes
        if during != trace[-1][1]:
            trace.append((issue, during))
        if cur != trace[-1][1]:
            trace.append((host, cur))

    coll = sorted((e.start_us, e.end_us) for e in events
                  if e.stream == COLLECTIVE_STREAM and e.end_us > e.start_us)
    busy = sorted((e.start_us, e.end_us) for e in events
                  if e.kind in (NodeKind.COMPUTE.value, NodeKind.OPTIMIZER_STEP.value)
                  and e.end_us > e.start_us)
    coll_time = sum(e - s for s, e in coll)
    overlap = _overlap(coll, busy) / coll_time if coll_time else 0.0

    return SimReport(
        iteration_time_us=max(end.values(), default=0),
        peak_memory_bytes=peak,
        initial_memory_bytes=init,
        final_memory_bytes=cur,
        events=tuple(events),
        memory_trace=tuple(trace),
        total_collective_bytes=collective_bytes,
        gather_count=gather_count,
        gathered_bytes=gathered,
        overlap_fraction=overlap,
        optimizer_resident=optimizer_resident,
        optimizer_bytes=sum(f.size_bytes for f in graph.fragments.values()) if optimizer_resident else 0,
        overflows=tuple(overflows),
        p_mem=MappingProxyType(p_mem),
        transient=MappingProxyType(transient),
    )


def profile(graph: Graph, schedule: Schedule, cost: CostModel, cluster: ClusterConfig,
            optimizer_resident: bool = False) -> MemoryProfile:
    return simulate(graph, schedule, cost, cluster, optimizer_resident).profile()
