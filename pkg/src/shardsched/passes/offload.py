"""Adaptive offloading of optimizer-state fragments to host memory.

Forward: offload only as many fragments as the profiled peak requires, start
all copies at the top of the schedule, and synchronize/free each one just
before the first operator that needs the room.  Backward: start reloading a
fragment at the earliest point from which the rest of the backward region
still fits with it resident, and synchronize all reloads right before the
optimizer step.
"""

from __future__ import annotations

import logging
import warnings
from collections import defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Iterable

from ..cost_model import ClusterConfig
from ..errors import (InsufficientHostCapacity, MissingStepMarker, OffloadInfeasible, PassError,
                      ReloadInfeasible)
from ..graph_ir import Graph, Node, NodeKind, OptimizerStateFragment, Phase, Schedule, natural_key
from ..simulator import MemoryProfile

log = logging.getLogger(__name__)

_TRANSFER_KINDS = (NodeKind.OFFLOAD_START, NodeKind.RELOAD_START, NodeKind.TRANSFER_SYNC)


@dataclass
class OffloadResult:
    graph: Graph
    schedule: Schedule
    offloaded: tuple = ()
    m_peak: int = 0
    m_opt: int = 0
    log: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def _optimizer_step(graph: Graph, order) -> int:
    for i, nid in enumerate(order):
        if graph[nid].kind is NodeKind.OPTIMIZER_STEP:
            return i
    raise MissingStepMarker("schedule has no optimizer step")


def apply_offload_forward(graph: Graph, schedule: Schedule, profile: MemoryProfile,
                          fragments: Iterable[OptimizerStateFragment],
                          cluster: ClusterConfig) -> OffloadResult:
    """Pick the fragments to offload and place their asynchronous copies and syncs.

    ``profile`` may include resident optimizer state (``profile.optimizer_bytes``);
    it is subtracted so the memory checks see activations and buffers only.
    """
    order = schedule.order
    for nid in order:
        if graph[nid].kind in _TRANSFER_KINDS:
            raise PassError(f"schedule already contains transfer node {nid}")
    profile.covers(schedule)
    limit = cluster.memory_limit
    frags = sorted(fragments, key=lambda f: natural_key(f.id))
    # an operator must fit while it runs and with whatever it leaves resident,
    # so the check uses that footprint (never below P_mem)
    base = {}
    for i, nid in enumerate(order):
        after = profile[order[i + 1]] if i + 1 < len(order) else 0
        base[nid] = max(profile.during(nid), after) - profile.optimizer_bytes
    m_opt = sum(f.size_bytes for f in frags)
    m_peak = max(base.values(), default=0)

    chosen: list[OptimizerStateFragment] = []
    off_bytes = 0
    for f in frags:
        if m_peak + m_opt - off_bytes > limit:
            chosen.append(f)
            off_bytes += f.size_bytes
    if cluster.host_memory_bytes is not None and off_bytes > cluster.host_memory_bytes:
        raise InsufficientHostCapacity(
            f"offloading {off_bytes} bytes exceeds host capacity {cluster.host_memory_bytes}")
    result = OffloadResult(graph, schedule.derive(order, "offload"), (), m_peak, m_opt)
    if not chosen:
        return result

    next_id = graph.next_id()
    new_nodes: list[Node] = []
    start_of: dict[str, int] = {}
    out: list[int] = []
    for f in chosen:
        n = Node(next_id, NodeKind.OFFLOAD_START, refs=(f.id,), phase=Phase.FORWARD)
        next_id += 1
        new_nodes.append(n)
        start_of[f.id] = n.id
        out.append(n.id)
        result.log.append({"event": "offload", "fragment": f.id, "node": n.id,
                           "position": len(out) - 1, "m_minus": 0})

    pending = deque(chosen)
    m_minus = 0
    for i, nid in enumerate(order):
        node = graph[nid]
        while base[nid] + m_opt - m_minus > limit:
            if not pending:
                raise OffloadInfeasible(
                    f"node {nid} needs {base[nid]} bytes before optimizer state; "
                    f"limit is {limit} even with every fragment offloaded", node=nid)
            f = pending.popleft()
            sync = Node(next_id, NodeKind.TRANSFER_SYNC, refs=(f.id,), deps={start_of[f.id]},
                        label="offload", phase=node.phase, micro_step=node.micro_step)
            next_id += 1
            new_nodes.append(sync)
            out.append(sync.id)
            m_minus += f.size_bytes
            result.log.append({"event": "sync", "fragment": f.id, "node": sync.id,
                               "before": nid, "position": len(out) - 1, "m_minus": m_minus})
        out.append(nid)
        result.log.append({"event": "check", "node": nid, "position": i,
                           "p_mem": profile[nid] - profile.optimizer_bytes, "footprint": base[nid],
                           "m_minus": m_minus, "value": base[nid] + m_opt - m_minus})

    result.graph = graph.rewrite(add=new_nodes)
    result.schedule = schedule.derive(out, "offload")
    result.offloaded = tuple(f.id for f in chosen)
    return result


def apply_reload_backward(graph: Graph, schedule: Schedule, profile: MemoryProfile,
                          offloaded: Iterable[str], cluster: ClusterConfig) -> OffloadResult:
    offloaded = list(offloaded)
    result = OffloadResult(graph, schedule.derive(schedule.order, "reload"), tuple(offloaded))
    if not offloaded:
        return result
    order = list(schedule.order)
    profile.covers(schedule)
    limit = cluster.memory_limit
    step_pos = _optimizer_step(graph, order)

    sync_of = {}
    for i, nid in enumerate(order):
        n = graph[nid]
        if n.kind is NodeKind.TRANSFER_SYNC and n.label == "offload":
            sync_of[n.refs[0]] = (i, nid)
    missing = [f for f in offloaded if f not in sync_of]
    if missing:
        raise PassError(f"fragments {missing} were never synchronized to host")
    lo = max(sync_of[f][0] for f in offloaded) + 1

    backward = [i for i in range(step_pos) if graph[order[i]].phase is Phase.BACKWARD]
    if backward:
        last_micro = max(graph[order[i]].micro_step for i in backward)
        lo = max(lo, min(i for i in backward if graph[order[i]].micro_step == last_micro))
    else:
        lo = max(lo, step_pos)

    suffix = [0] * (step_pos + 1)
    for i in range(step_pos - 1, lo - 1, -1):
        suffix[i] = max(suffix[i + 1], profile.during(order[i]))

    placed: dict[int, list[str]] = defaultdict(list)
    late: list[str] = []
    reloaded = 0
    ptr = lo
    for fid in reversed(offloaded):
        nbytes = graph.fragments[fid].size_bytes
        spot = None
        if not late:
            spot = next((i for i in range(ptr, step_pos) if suffix[i] + reloaded + nbytes <= limit), None)
        if spot is None:
            late.append(fid)
            msg = f"fragment {fid} reloaded synchronously before the optimizer step"
            result.warnings.append(msg)
            warnings.warn(msg, ReloadInfeasible, stacklevel=2)
            continue
        placed[spot].append(fid)
        reloaded += nbytes
        ptr = spot

    next_id = graph.next_id()
    new_nodes: list[Node] = []
    reload_of: dict[str, int] = {}
    syncs: list[int] = []
    out: list[int] = []

    def start_reload(fid: str, anchor: Node, mode: str):
        nonlocal next_id
        n = Node(next_id, NodeKind.RELOAD_START, refs=(fid,), deps={sync_of[fid][1]},
                 phase=anchor.phase, micro_step=anchor.micro_step)
        next_id += 1
        new_nodes.append(n)
        reload_of[fid] = n.id
        out.append(n.id)
        result.log.append({"event": "reload", "mode": mode, "fragment": fid, "node": n.id,
                           "before": anchor.id, "position": len(out) - 1})

    for i, nid in enumerate(order):
        node = graph[nid]
        for fid in placed.get(i, ()):
            start_reload(fid, node, "async")
        if i == step_pos:
            for fid in late:
                start_reload(fid, node, "sync")
            for fid in reversed(offloaded):
                s = Node(next_id, NodeKind.TRANSFER_SYNC, refs=(fid,), deps={reload_of[fid]},
                         label="reload", phase=node.phase, micro_step=node.micro_step)
                next_id += 1
                new_nodes.append(s)
                syncs.append(s.id)
                out.append(s.id)
                result.log.append({"event": "reload_sync", "fragment": fid, "node": s.id,
                                   "position": len(out) - 1})
            new_nodes.append(replace(node, deps=node.deps | set(syncs)))
        out.append(nid)

    result.graph = graph.rewrite(add=new_nodes)
    result.schedule = schedule.derive(out, "reload")
    return result


def apply_offload_sync_all(graph: Graph, schedule: Schedule) -> tuple[Graph, Schedule]:
    """Reference variant: offload everything up front and reload it all at the step, blocking."""
    order = list(schedule.order)
    step_pos = _optimizer_step(graph, order)
    frags = sorted(graph.fragments.values(), key=lambda f: natural_key(f.id))
    next_id = graph.next_id()
    nodes: list[Node] = []

    def make(kind, fid, deps=(), label=None, phase=Phase.FORWARD, micro=0):
        nonlocal next_id
        n = Node(next_id, kind, refs=(fid,), deps=frozenset(deps), label=label,
                 phase=phase, micro_step=micro)
        next_id += 1
        nodes.append(n)
        return n.id

    starts = {f.id: make(NodeKind.OFFLOAD_START, f.id) for f in frags}
    off_syncs = {f.id: make(NodeKind.TRANSFER_SYNC, f.id, {starts[f.id]}, "offload") for f in frags}
    step = graph[order[step_pos]]
    where = dict(phase=step.phase, micro=step.micro_step)
    reloads = {f.id: make(NodeKind.RELOAD_START, f.id, {off_syncs[f.id]}, **where) for f in frags}
    re_syncs = {f.id: make(NodeKind.TRANSFER_SYNC, f.id, {reloads[f.id]}, "reload", **where)
                for f in frags}
    nodes.append(replace(step, deps=step.deps | set(re_syncs.values())))
    out = (list(starts.values()) + list(off_syncs.values()) + order[:step_pos]
           + list(reloads.values()) + list(re_syncs.values()) + order[step_pos:])
    return graph.rewrite(add=nodes), schedule.derive(out, "offload-sync-all")
