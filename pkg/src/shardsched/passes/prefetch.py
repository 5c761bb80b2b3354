"""Proactive prefetching: move all-gathers earlier while memory allows, fusing small ones.

The schedule is scanned back to front.  Each all-gather is tentatively added
to the current group ``U`` if, with the whole group hoisted above the
preceding operator, both the checkpoint memory and the group's buffer total
stay under their limits.  When a gather does not fit, the group is emitted
right where the scan stands and a new group is started.  The group left over
at the end goes to the very front of the schedule.

``strict=True`` additionally re-checks every operator the group is hoisted
over (including its transient bytes) and emits the group early if any of them
would exceed the limit.  The default follows the check points of the original
algorithm only.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

from ..cost_model import ClusterConfig, CostModel
from ..errors import InfeasibleBaseline
from ..graph_ir import Graph, Node, NodeKind, Schedule
from ..simulator import MemoryProfile

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PrefetchGroup:
    members: tuple  # original AllGather ids, in input schedule order
    total_buffer_bytes: int
    # input-schedule node the group is emitted after; None means the front
    anchor: int | None


@dataclass
class PrefetchResult:
    graph: Graph
    schedule: Schedule
    groups: list[PrefetchGroup]
    # output order before fusion: node ids, with each group as a tuple of member ids
    placement: list
    log: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


def plan_fusion(sizes: Sequence[int], cost: CostModel, alpha: float,
                refs: Sequence[Sequence[str]] | None = None) -> list[list[int]]:
    """Partition ``sizes`` (indices) by folding adjacent pairs left to right.

    With ``refs``, a gather never joins a part that already holds one of its
    parameters: a second copy of a parameter needs its own buffer.
    """
    if not sizes:
        return []
    parts = [[0]]
    acc = sizes[0]
    held = set(refs[0]) if refs else set()
    for k in range(1, len(sizes)):
        clash = bool(refs) and not held.isdisjoint(refs[k])
        if not clash and cost.should_fuse(acc, sizes[k], alpha):
            parts[-1].append(k)
            acc += sizes[k]
            held |= set(refs[k]) if refs else set()
        else:
            parts.append([k])
            acc = sizes[k]
            held = set(refs[k]) if refs else set()
    return parts


def fuse(graph: Graph, members: Sequence[int], cost: CostModel, alpha: float) -> tuple[Graph, list[int]]:
    """Merge gathers in ``members`` where profitable.

    Returns the rewritten graph and the resulting gather ids in order.
    Consumers of a merged gather are rewired to the fused node.
    """
    if not members:
        return graph, []
    parts = plan_fusion([graph.gather_bytes(m) for m in members], cost, alpha,
                        [graph[m].refs for m in members])
    out_ids: list[int] = []
    added: list[Node] = []
    removed: list[int] = []
    remap: dict[int, int] = {}
    next_id = graph.next_id()
    for part in parts:
        ids = [members[k] for k in part]
        if len(ids) == 1:
            out_ids.append(ids[0])
            continue
        nodes = [graph[i] for i in ids]
        refs: list[str] = []
        origin: list[int] = []
        deps: set[int] = set()
        for n in nodes:
            refs += n.refs
            origin += list(n.fused_from or (n.id,))
            deps |= n.deps
        fused = Node(next_id, NodeKind.ALLGATHER, refs=tuple(refs), deps=frozenset(deps),
                     phase=nodes[0].phase, micro_step=nodes[0].micro_step, fused_from=tuple(origin))
        next_id += 1
        added.append(fused)
        removed += ids
        remap.update({i: fused.id for i in ids})
        out_ids.append(fused.id)
    if not added:
        return graph, out_ids
    for n in graph.nodes.values():
        if n.deps & remap.keys():
            deps = frozenset(remap.get(d, d) for d in n.deps)
            added.append(replace(n, deps=deps))
    return graph.rewrite(add=added, remove=removed), out_ids


def apply_prefetch(graph: Graph, schedule: Schedule, profile: MemoryProfile, cluster: ClusterConfig,
                   cost: CostModel, strict: bool = False) -> PrefetchResult:
    order = schedule.order
    profile.covers(schedule)
    limit = cluster.memory_limit
    group_limit = cluster.prefetch_limit
    alpha = cluster.fusion_threshold

    size = {nid: graph.gather_bytes(nid) for nid in order if graph[nid].kind is NodeKind.ALLGATHER}
    for nid in order:
        if nid in size and profile[nid] + size[nid] >= limit:
            raise InfeasibleBaseline(
                f"all-gather {nid} already exceeds the memory limit at its own position", node=nid)

    rev: list = []  # output in reverse
    group: list[int] = []  # current U, latest member first
    group_bytes = 0
    groups: list[PrefetchGroup] = []
    decisions: list[dict] = []
    warnings: list[str] = []

    def emit(anchor: int | None) -> tuple:
        nonlocal group, group_bytes
        members = tuple(reversed(group))
        if members:
            groups.append(PrefetchGroup(members, group_bytes, anchor))
            rev.append(members)
        group, group_bytes = [], 0
        return members

    def try_add(i: int) -> bool:
        nonlocal group_bytes
        nid = order[i]
        vm_group = group_bytes + size[nid]
        vm_check = profile[order[i - 1]] + vm_group
        ok = vm_check < limit and vm_group < group_limit
        if ok and strict:
            ok = profile[nid] + vm_group < limit
        if ok:
            group.append(nid)
            group_bytes = vm_group
            decisions.append({"node": nid, "action": "grouped", "vm_group": vm_group,
                              "vm_checkpoint": vm_check, "position": i})
        return ok

    def blocks(nid: int) -> bool:
        """True if the current group may not be hoisted above ``nid``."""
        if not group:
            return False
        if strict and profile.during(nid) + group_bytes >= limit:
            return True
        return any(nid in graph[g].deps for g in group)

    for i in range(len(order) - 1, 0, -1):
        nid = order[i]
        if nid in size:
            if try_add(i):
                continue
            vm_group = group_bytes + size[nid]
            members = emit(nid)
            decisions.append({"node": nid, "action": "emitted", "group": list(members),
                              "vm_group": vm_group,
                              "vm_checkpoint": profile[order[i - 1]] + vm_group, "position": i})
            if try_add(i):
                continue
            rev.append(nid)
            decisions.append({"node": nid, "action": "kept", "position": i})
            if size[nid] >= group_limit:
                msg = f"all-gather {nid} alone exceeds the prefetch group limit; left in place"
                warnings.append(msg)
                log.warning(msg)
        else:
            if blocks(nid):
                members = emit(nid)
                decisions.append({"node": nid, "action": "emitted", "group": list(members),
                                  "vm_group": sum(size[m] for m in members),
                                  "vm_checkpoint": profile.during(nid) + sum(size[m] for m in members),
                                  "position": i})
            rev.append(nid)

    if order:
        first = order[0]
        if blocks(first):
            emit(first)
            rev.append(first)
        else:
            rev.append(first)
            emit(None)

    placement = rev[::-1]
    out_graph = graph
    out_order: list[int] = []
    for item in placement:
        if isinstance(item, tuple):
            out_graph, ids = fuse(out_graph, item, cost, alpha)
            out_order += ids
        else:
            out_order.append(item)
    return PrefetchResult(out_graph, schedule.derive(out_order, "prefetch"), groups, placement,
                          decisions, warnings)
