"""Computation-graph IR, schedules, and the structural analyses passes rely on.

A :class:`Graph` is an immutable DAG of :class:`Node` objects plus the
parameters and optimizer-state fragments they reference.  A
:class:`Schedule` is a total order over the node ids.  Every rewrite returns
new objects; nothing here mutates in place.
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import DependencyViolation, UnusedParameter


class NodeKind(str, Enum):
    COMPUTE = "compute"
    ALLGATHER = "allgather"
    REDUCE_SCATTER = "reduce_scatter"
    RELEASE = "release"
    OFFLOAD_START = "offload_start"
    RELOAD_START = "reload_start"
    TRANSFER_SYNC = "transfer_sync"
    OPTIMIZER_STEP = "optimizer_step"
    MARKER = "marker"

    @classmethod
    def parse(cls, text: str) -> "NodeKind":
        key = text.replace("_", "").replace("-", "").lower()
        for kind in cls:
            if kind.value.replace("_", "") == key:
                return kind
        raise ValueError(f"unknown node kind {text!r}")


class Phase(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    STEP = "step"


PHASE_ORDER = {Phase.FORWARD: 0, Phase.BACKWARD: 1, Phase.STEP: 2}

MARKER_LABELS = ("forward-begin", "forward-end", "backward-begin", "backward-end", "step-end")

# kinds that must name exactly one parameter or fragment (fused gathers may name several)
_SINGLE_REF_KINDS = {
    NodeKind.RELEASE,
    NodeKind.OFFLOAD_START,
    NodeKind.RELOAD_START,
    NodeKind.TRANSFER_SYNC,
    NodeKind.REDUCE_SCATTER,
}
FRAGMENT_KINDS = {NodeKind.OFFLOAD_START, NodeKind.RELOAD_START, NodeKind.TRANSFER_SYNC}


def natural_key(text: str):
    """Sort key that orders ``p2`` before ``p10``."""
    return tuple(int(tok) if tok.isdigit() else tok for tok in re.split(r"(\d+)", str(text)))


@dataclass(frozen=True)
class Node:
    id: int
    kind: NodeKind
    duration_us: int = 0
    transient_bytes: int = 0
    persistent_delta_bytes: int = 0
    deps: frozenset = frozenset()
    refs: tuple = ()
    micro_step: int = 0
    phase: Phase = Phase.FORWARD
    # marker name, or "offload"/"reload" on transfer syncs
    label: str | None = None
    # original gather ids merged into this node by fusion
    fused_from: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "deps", frozenset(self.deps))
        object.__setattr__(self, "refs", tuple(self.refs))
        object.__setattr__(self, "fused_from", tuple(self.fused_from))
        if self.id in self.deps:
            raise ValueError(f"node {self.id} depends on itself")
        if self.duration_us < 0 or self.transient_bytes < 0:
            raise ValueError(f"node {self.id}: negative duration or transient bytes")
        if self.micro_step < 0:
            raise ValueError(f"node {self.id}: negative micro_step")
        if self.kind in _SINGLE_REF_KINDS and len(self.refs) != 1:
            raise ValueError(f"node {self.id}: {self.kind.value} must reference exactly one tensor")
        if self.kind is NodeKind.ALLGATHER and not self.refs:
            raise ValueError(f"node {self.id}: allgather without parameter")
        if self.kind is NodeKind.MARKER:
            if self.duration_us or self.transient_bytes or self.persistent_delta_bytes:
                raise ValueError(f"marker {self.id} must not carry cost")
            if self.label not in MARKER_LABELS:
                raise ValueError(f"marker {self.id} has unknown label {self.label!r}")
        if self.kind is NodeKind.TRANSFER_SYNC and self.label not in ("offload", "reload"):
            raise ValueError(f"transfer sync {self.id} must be labelled 'offload' or 'reload'")

    @property
    def param_ref(self):
        return self.refs[0] if self.refs else None

    @property
    def region(self) -> tuple[Phase, int]:
        return (self.phase, self.micro_step)


@dataclass(frozen=True)
class Parameter:
    id: str
    size_bytes: int
    shard_count: int = 1

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError(f"parameter {self.id}: size_bytes must be positive")
        if self.shard_count < 1:
            raise ValueError(f"parameter {self.id}: shard_count must be >= 1")

    @property
    def shard_bytes(self) -> int:
        return math.ceil(self.size_bytes / self.shard_count)


@dataclass(frozen=True)
class OptimizerStateFragment:
    id: str
    size_bytes: int

    def __post_init__(self):
        if self.size_bytes <= 0:
            raise ValueError(f"fragment {self.id}: size_bytes must be positive")


@dataclass(frozen=True)
class Graph:
    nodes: Mapping[int, Node]
    parameters: Mapping[str, Parameter] = field(default_factory=dict)
    fragments: Mapping[str, OptimizerStateFragment] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "nodes", MappingProxyType(dict(self.nodes)))
        object.__setattr__(self, "parameters", MappingProxyType(dict(self.parameters)))
        object.__setattr__(self, "fragments", MappingProxyType(dict(self.fragments)))
        for node in self.nodes.values():
            missing = [d for d in node.deps if d not in self.nodes]
            if missing:
                raise ValueError(f"node {node.id} depends on unknown nodes {sorted(missing)}")
            pool = self.fragments if node.kind in FRAGMENT_KINDS else self.parameters
            for ref in node.refs:
                if ref not in pool:
                    raise ValueError(f"node {node.id} references unknown tensor {ref!r}")
        if len(topological_order(self)) != len(self.nodes):
            raise ValueError("dependency graph contains a cycle")

    @classmethod
    def build(cls, nodes: Iterable[Node], parameters: Iterable[Parameter] = (),
              fragments: Iterable[OptimizerStateFragment] = ()) -> "Graph":
        node_map: dict[int, Node] = {}
        for n in nodes:
            if n.id in node_map:
                raise ValueError(f"duplicate node id {n.id}")
            node_map[n.id] = n
        return cls(node_map, {p.id: p for p in parameters}, {f.id: f for f in fragments})

    def __getitem__(self, node_id: int) -> Node:
        return self.nodes[node_id]

    def next_id(self) -> int:
        return max(self.nodes, default=-1) + 1

    def rewrite(self, add: Iterable[Node] = (), remove: Iterable[int] = (),
                parameters: Mapping[str, Parameter] | None = None) -> "Graph":
        """Return a copy with ``remove`` dropped and ``add`` inserted or replaced."""
        nodes = dict(self.nodes)
        for nid in remove:
            del nodes[nid]
        for n in add:
            nodes[n.id] = n
        params = self.parameters if parameters is None else parameters
        return Graph(nodes, params, self.fragments)

    def gather_bytes(self, node_id: int) -> int:
        return sum(self.parameters[p].size_bytes for p in self.nodes[node_id].refs)

    def consumers(self, param: str) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind is NodeKind.COMPUTE and param in n.refs]

    def of_kind(self, kind: NodeKind) -> list[Node]:
        return [n for n in self.nodes.values() if n.kind is kind]


@dataclass(frozen=True)
class Schedule:
    order: tuple
    provenance: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "order", tuple(self.order))
        object.__setattr__(self, "provenance", tuple(self.provenance))

    def __len__(self) -> int:
        return len(self.order)

    def __iter__(self):
        return iter(self.order)

    def positions(self) -> dict[int, int]:
        return {nid: i for i, nid in enumerate(self.order)}

    def derive(self, order: Sequence[int], pass_name: str) -> "Schedule":
        return Schedule(tuple(order), self.provenance + (pass_name,))


def topological_order(graph: Graph) -> list[int]:
    """Kahn's algorithm; ready nodes are taken in ascending id order."""
    indeg = {nid: len(n.deps) for nid, n in graph.nodes.items()}
    users: dict[int, list[int]] = {nid: [] for nid in graph.nodes}
    for n in graph.nodes.values():
        for d in n.deps:
            users[d].append(n.id)
    ready = [nid for nid, k in indeg.items() if k == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                heapq.heappush(ready, u)
    return order


def initial_schedule(graph: Graph) -> Schedule:
    return Schedule(tuple(topological_order(graph)), ("initial",))


@dataclass(frozen=True)
class Violation:
    kind: str  # "missing" | "duplicate" | "unknown" | "dependency_inversion"
    node: int
    dep: int | None = None

    def __str__(self) -> str:
        if self.kind == "dependency_inversion":
            return f"node {self.node} scheduled before its dependency {self.dep}"
        return f"{self.kind} node {self.node}"


def validate(graph: Graph, schedule: Schedule) -> list[Violation]:
    """Every way ``schedule`` fails to be a topological order of ``graph``."""
    out: list[Violation] = []
    pos: dict[int, int] = {}
    for i, nid in enumerate(schedule.order):
        if nid not in graph.nodes:
            out.append(Violation("unknown", nid))
        elif nid in pos:
            out.append(Violation("duplicate", nid))
        else:
            pos[nid] = i
    for nid in sorted(graph.nodes):
        if nid not in pos:
            out.append(Violation("missing", nid))
    for nid, i in sorted(pos.items(), key=lambda kv: kv[1]):
        for d in sorted(graph.nodes[nid].deps):
            if d in pos and pos[d] > i:
                out.append(Violation("dependency_inversion", nid, d))
    return out


def first_last_use(graph: Graph, schedule: Schedule, param: str) -> dict[tuple[Phase, int], tuple[int, int]]:
    """Schedule positions of the first and last compute node consuming ``param``.

    Keyed by ``(phase, micro_step)`` region.
    """
    spans: dict[tuple[Phase, int], tuple[int, int]] = {}
    for i, nid in enumerate(schedule.order):
        n = graph.nodes[nid]
        if n.kind is NodeKind.COMPUTE and param in n.refs:
            lo, _ = spans.get(n.region, (i, i))
            spans[n.region] = (lo, i)
    if not spans:
        raise UnusedParameter(param)
    return dict(sorted(spans.items(), key=lambda kv: (kv[0][1], PHASE_ORDER[kv[0][0]])))


def _check_insert(graph: Graph, order: list[int], node_id: int, index: int) -> None:
    node = graph.nodes[node_id]
    before = set(order[:index])
    late = [d for d in node.deps if d not in before]
    if late:
        raise DependencyViolation(
            f"cannot insert node {node_id} at {index}: dependencies {sorted(late)} come later")
    for other in order[:index]:
        if node_id in graph.nodes[other].deps:
            raise DependencyViolation(
                f"cannot insert node {node_id} at {index}: node {other} depends on it and is earlier")


def insert_before(graph: Graph, schedule: Schedule, node_id: int, anchor: int) -> Schedule:
    order = list(schedule.order)
    if node_id in order:
        raise ValueError(f"node {node_id} already scheduled")
    index = order.index(anchor)
    _check_insert(graph, order, node_id, index)
    order.insert(index, node_id)
    return Schedule(tuple(order), schedule.provenance)


def insert_after(graph: Graph, schedule: Schedule, node_id: int, anchor: int) -> Schedule:
    order = list(schedule.order)
    if node_id in order:
        raise ValueError(f"node {node_id} already scheduled")
    index = order.index(anchor) + 1
    _check_insert(graph, order, node_id, index)
    order.insert(index, node_id)
    return Schedule(tuple(order), schedule.provenance)


def remove(schedule: Schedule, node_id: int) -> Schedule:
    order = list(schedule.order)
    order.remove(node_id)
    return Schedule(tuple(order), schedule.provenance)


def placement_violations(graph: Graph, schedule: Schedule) -> list[str]:
    """Check that sharded parameters are gathered at every use and released afterwards.

    Parameters that no gather references are treated as replicated and ignored.
    Liveness is tracked as a count because prefetching may keep two gathered
    copies of one parameter alive at once.
    """
    sharded = {p for n in graph.nodes.values() if n.kind is NodeKind.ALLGATHER for p in n.refs}
    live = {p: 0 for p in sharded}
    problems = []
    for i, nid in enumerate(schedule.order):
        n = graph.nodes[nid]
        if n.kind is NodeKind.ALLGATHER:
            for p in n.refs:
                live[p] += 1
        elif n.kind is NodeKind.RELEASE:
            p = n.refs[0]
            if live.get(p, 0) <= 0:
                problems.append(f"release {nid} of {p} at {i} without a live gather")
            else:
                live[p] -= 1
        elif n.kind is NodeKind.COMPUTE:
            for p in n.refs:
                if p in sharded and live[p] <= 0:
                    problems.append(f"compute {nid} at {i} uses {p} while it is not gathered")
    for p, count in sorted(live.items()):
        if count:
            problems.append(f"{p} still gathered at end of schedule ({count})")
    return problems


def with_shard_count(graph: Graph, shard_count: int) -> dict[str, Parameter]:
    return {pid: replace(p, shard_count=shard_count) for pid, p in graph.parameters.items()}
