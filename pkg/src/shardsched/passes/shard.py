"""Fully-sharded rewrite: gather right before first use, release right after last use."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace

from ..cost_model import ClusterConfig
from ..errors import AlreadySharded, UnusedParameter
from ..graph_ir import Graph, Node, NodeKind, Schedule, first_last_use, with_shard_count


@dataclass
class ShardResult:
    graph: Graph
    schedule: Schedule
    warnings: list[str] = field(default_factory=list)


def apply_sharding(graph: Graph, schedule: Schedule, cluster: ClusterConfig) -> ShardResult:
    """Insert one AllGather/Release pair per parameter per (phase, micro-step) region.

    Every parameter is partitioned across ``cluster.device_count`` devices.  The
    gather becomes a dependency of each consumer in its region and the release
    depends on all of them, so later passes can move gathers without losing
    the use-after-gather guarantee.
    """
    for n in graph.nodes.values():
        if n.kind in (NodeKind.ALLGATHER, NodeKind.RELEASE):
            raise AlreadySharded(f"graph already contains {n.kind.value} node {n.id}")

    next_id = graph.next_id()
    gathers_before: dict[int, list[int]] = defaultdict(list)
    releases_after: dict[int, list[int]] = defaultdict(list)
    extra_deps: dict[int, set[int]] = defaultdict(set)
    new_nodes: list[Node] = []
    warnings = []

    for pid in graph.parameters:
        try:
            spans = first_last_use(graph, schedule, pid)
        except UnusedParameter as exc:
            warnings.append(str(exc))
            continue
        for (phase, micro), (first, last) in spans.items():
            users = [n.id for n in graph.consumers(pid) if n.region == (phase, micro)]
            ag = Node(next_id, NodeKind.ALLGATHER, refs=(pid,), phase=phase, micro_step=micro)
            rel = Node(next_id + 1, NodeKind.RELEASE, refs=(pid,), phase=phase,
                       micro_step=micro, deps=frozenset(users))
            next_id += 2
            new_nodes += [ag, rel]
            for u in users:
                extra_deps[u].add(ag.id)
            gathers_before[first].append(ag.id)
            releases_after[last].append(rel.id)

    rewired = [
        replace(graph[nid], deps=graph[nid].deps | frozenset(extra))
        for nid, extra in extra_deps.items()
    ]
    parameters = with_shard_count(graph, cluster.device_count)
    out_graph = graph.rewrite(add=new_nodes + rewired, parameters=parameters)

    order = []
    for i, nid in enumerate(schedule.order):
        order.extend(gathers_before.get(i, ()))
        order.append(nid)
        order.extend(releases_after.get(i, ()))
    return ShardResult(out_graph, schedule.derive(order, "shard"), warnings)
