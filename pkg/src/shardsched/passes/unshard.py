"""Selective unsharding: keep chosen parameters gathered until after the optimizer step."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable

from ..cost_model import ClusterConfig, CostModel, allgather_buffer_size
from ..errors import MissingStepMarker
from ..graph_ir import Graph, NodeKind, Parameter, Schedule, natural_key
from ..simulator import MemoryProfile


@dataclass
class UnshardSelection:
    selected: tuple
    projected_peak: int
    log: list[dict] = field(default_factory=list)


def select_unshard(params: Iterable[Parameter], profile: MemoryProfile, cluster: ClusterConfig,
                   cost: CostModel) -> UnshardSelection:
    """Greedy pick by communication time per buffer byte, highest first.

    Stops at the first parameter whose buffer no longer fits between the
    profiled peak and the memory limit.
    """
    # equal ratios (zero latency) fall back to smaller buffers first
    ranked = sorted(params, key=lambda p: (-cost.unshard_priority(allgather_buffer_size(p)),
                                           allgather_buffer_size(p), natural_key(p.id)))
    budget_peak = profile.peak_bytes
    cumulative = 0
    selected = []
    entries = []
    open_ = True
    for p in ranked:
        nbytes = allgather_buffer_size(p)
        take = open_ and budget_peak + cumulative + nbytes <= cluster.memory_limit
        if take:
            cumulative += nbytes
            selected.append(p.id)
        else:
            open_ = False
        entries.append({"id": p.id, "B_ag": nbytes,
                        "ratio": float(cost.unshard_priority(nbytes)),
                        "selected": take, "cumulative_bytes": cumulative})
    return UnshardSelection(tuple(selected), budget_peak + cumulative, entries)


def gathered_params(graph: Graph) -> list[Parameter]:
    seen = []
    for n in sorted(graph.nodes.values(), key=lambda n: n.id):
        if n.kind is NodeKind.ALLGATHER:
            seen += [p for p in n.refs if p not in seen]
    return [graph.parameters[p] for p in sorted(seen, key=natural_key)]


def apply_unshard(graph: Graph, schedule: Schedule, selected: Iterable[str]) -> tuple[Graph, Schedule]:
    selected = list(selected)
    if not selected:
        return graph, schedule.derive(schedule.order, "unshard")
    order = list(schedule.order)
    step_end = [nid for nid in order
                if graph[nid].kind is NodeKind.MARKER and graph[nid].label == "step-end"]
    if not step_end:
        raise MissingStepMarker("no step-end marker to host deferred releases")
    host = step_end[-1]

    nodes = dict(graph.nodes)
    deferred: list[int] = []
    for pid in selected:
        gathers = [nid for nid in order
                   if nodes[nid].kind is NodeKind.ALLGATHER and pid in nodes[nid].refs]
        releases = [nid for nid in order
                    if nodes[nid].kind is NodeKind.RELEASE and nodes[nid].refs[0] == pid]
        if not gathers:
            continue
        keep = gathers[0]
        for g in gathers[1:]:
            rest = tuple(r for r in nodes[g].refs if r != pid)
            if rest:
                nodes[g] = replace(nodes[g], refs=rest)
            else:
                del nodes[g]
                order.remove(g)
                for nid, n in list(nodes.items()):
                    if g in n.deps:
                        nodes[nid] = replace(n, deps=(n.deps - {g}) | {keep})
        users = [n.id for n in nodes.values() if n.kind is NodeKind.COMPUTE and pid in n.refs]
        for u in users:
            nodes[u] = replace(nodes[u], deps=nodes[u].deps | {keep})
        for r in releases:
            order.remove(r)
            del nodes[r]
        gone = set(releases)
        for nid, n in list(nodes.items()):
            if n.deps & gone:
                nodes[nid] = replace(n, deps=n.deps - gone)
        if releases:
            survivor = releases[-1]
            nodes[survivor] = replace(graph[survivor], deps=frozenset(users) | {host},
                                      phase=graph[host].phase, micro_step=graph[host].micro_step)
            deferred.append(survivor)

    at = order.index(host) + 1
    order[at:at] = deferred
    out = Graph(nodes, graph.parameters, graph.fragments)
    return out, schedule.derive(order, "unshard")
