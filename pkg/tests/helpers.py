"""Shared builders and independent oracles for the test suite.

Nothing here imports the pass implementations; the checkers work from the
raw node fields so they can catch mistakes in the library's own analyses.
"""

from __future__ import annotations

import random
from collections import Counter

from shardsched.cost_model import ClusterConfig, CostModel
from shardsched.graph_ir import Graph, Node, NodeKind, Parameter, Phase, Schedule
from shardsched.workload import generate_workload, random_workload

GiB = 1024**3
MB = 1_000_000

# acceptance lines collected for the terminal summary
RESULTS: list[str] = []


def structure_violations(graph: Graph, schedule: Schedule) -> list[str]:
    """Permutation, dependency and gather/release liveness check, from scratch."""
    out = []
    order = list(schedule.order)
    counts = Counter(order)
    out += [f"duplicate {n}" for n, c in counts.items() if c > 1]
    out += [f"missing {n}" for n in graph.nodes if n not in counts]
    out += [f"unknown {n}" for n in counts if n not in graph.nodes]
    if out:
        return out
    seen = set()
    for nid in order:
        for d in graph.nodes[nid].deps:
            if d not in seen:
                out.append(f"{nid} before its dependency {d}")
        seen.add(nid)

    gathered = {r for n in graph.nodes.values() if n.kind is NodeKind.ALLGATHER for r in n.refs}
    live = Counter()
    for nid in order:
        n = graph.nodes[nid]
        if n.kind is NodeKind.ALLGATHER:
            for r in n.refs:
                live[r] += 1
        elif n.kind is NodeKind.RELEASE:
            if live[n.refs[0]] <= 0:
                out.append(f"release {nid} of {n.refs[0]} without a live gather")
            live[n.refs[0]] -= 1
        elif n.kind is NodeKind.COMPUTE:
            for r in n.refs:
                if r in gathered and live[r] <= 0:
                    out.append(f"compute {nid} uses {r} while it is not gathered")
    out += [f"{p} still gathered at end ({c})" for p, c in live.items() if c]
    return out


def reference_prefetch(ops, is_gather, buf, pmem, limit, group_limit):
    """Straight-line reverse scan over ``ops`` (faithful mode).

    Returns (placement, groups) where placement holds node ids and tuples for
    emitted groups, and groups is a list of (members, anchor).
    """
    out_rev = []
    groups = []
    unscheduled = []
    i = len(ops) - 1
    while i >= 1:
        op = ops[i]
        if not is_gather[op]:
            out_rev.append(op)
            i -= 1
            continue
        v_u = buf[op] + sum(buf[u] for u in unscheduled)
        v_prev = pmem[ops[i - 1]] + v_u
        if v_prev < limit and v_u < group_limit:
            unscheduled.append(op)
            i -= 1
            continue
        if unscheduled:
            members = tuple(reversed(unscheduled))
            out_rev.append(members)
            groups.append((members, op))
            unscheduled = []
        if pmem[ops[i - 1]] + buf[op] < limit and buf[op] < group_limit:
            unscheduled.append(op)
        else:
            out_rev.append(op)
        i -= 1
    if ops:
        out_rev.append(ops[0])
    if unscheduled:
        members = tuple(reversed(unscheduled))
        out_rev.append(members)
        groups.append((members, None))
    return out_rev[::-1], groups


def fig5_workload():
    """16 forward layers, 10 ms compute and a 5 ms gather each."""
    graph = generate_workload(16, 10_000, 200 * MB, backward=False, optimizer_multiplier=0)
    cost = CostModel(collective_latency_us=0, collective_bandwidth=40e9)
    cluster = ClusterConfig(prefetch_limit=100 * GiB)
    return graph, cost, cluster


def chain_graph(specs, params=(), frags=()):
    """Build a graph from ``(kind, kw)`` tuples, each depending on the previous node."""
    nodes = []
    for i, (kind, kw) in enumerate(specs):
        deps = kw.pop("deps", {i - 1} if i else set())
        nodes.append(Node(i, kind, deps=frozenset(deps), **kw))
    return Graph.build(nodes, params, frags)


def random_instance(rng: random.Random) -> Graph:
    """Alternate between layered and random-DAG workloads."""
    if rng.random() < 0.5:
        layers = rng.randint(1, 8)
        acc = rng.randint(1, 3)
        while 2 * layers * acc > 64:
            acc -= 1
        sizes = [rng.randint(1, 64) * MB for _ in range(layers)]
        return generate_workload(
            layers, rng.randint(100, 5000), sizes, acc, rng.choice([0, 1, 2]),
            activation_bytes=rng.randint(0, 16) * MB, transient_bytes=rng.randint(0, 4) * MB,
            optimizer_step_us=rng.randint(0, 300), fragments=rng.randint(1, 8),
            reduce_scatter=rng.random() < 0.3)
    return random_workload(rng)

