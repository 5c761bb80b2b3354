"""Synthetic workloads: regular layered models and randomized DAGs."""

from __future__ import annotations

import random
from fractions import Fraction
from typing import Sequence

from .graph_ir import (Graph, Node, NodeKind, OptimizerStateFragment, Parameter, Phase, Schedule)


def split_evenly(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


class _Builder:
    def __init__(self):
        self.nodes: list[Node] = []

    def add(self, kind, deps=(), **kw) -> int:
        nid = len(self.nodes)
        self.nodes.append(Node(nid, kind, deps=frozenset(deps), **kw))
        return nid

    def marker(self, label, deps, phase, micro) -> int:
        return self.add(NodeKind.MARKER, deps, label=label, phase=phase, micro_step=micro)


def generate_workload(layers: int, compute_us: int, param_bytes: int | Sequence[int],
                      accumulation_steps: int = 1, optimizer_multiplier: float = 2,
                      *, activation_bytes: int = 0, transient_bytes: int = 0,
                      backward: bool = True, backward_compute_us: int | None = None,
                      optimizer_step_us: int = 0, fragments: int = 32,
                      reduce_scatter: bool = False) -> Graph:
    """Unrolled layered forward(+backward) graph with one parameter per layer.

    Each micro-step is ``forward-begin, f0..f{L-1}, forward-end`` followed, when
    ``backward`` is set, by ``backward-begin, b{L-1}..b0, backward-end``.
    Forward layers add ``activation_bytes`` of resident memory and the matching
    backward layer frees it.  One optimizer step and a ``step-end`` marker close
    the iteration.  Optimizer state of ``optimizer_multiplier`` times the total
    parameter size is split into ``fragments`` near-equal pieces.
    """
    if layers < 1 or compute_us < 0 or accumulation_steps < 1 or fragments < 1:
        raise ValueError("layers, accumulation_steps and fragments must be positive")
    sizes = [param_bytes] * layers if isinstance(param_bytes, int) else list(param_bytes)
    if len(sizes) != layers:
        raise ValueError("need one parameter size per layer")
    params = [Parameter(f"p{i}", s) for i, s in enumerate(sizes)]
    bwd_us = compute_us if backward_compute_us is None else backward_compute_us

    b = _Builder()
    prev = None
    for m in range(accumulation_steps):
        prev = b.marker("forward-begin", [prev] if prev is not None else [], Phase.FORWARD, m)
        for i in range(layers):
            prev = b.add(NodeKind.COMPUTE, [prev], duration_us=compute_us,
                         transient_bytes=transient_bytes, persistent_delta_bytes=activation_bytes,
                         refs=(params[i].id,), phase=Phase.FORWARD, micro_step=m)
        prev = b.marker("forward-end", [prev], Phase.FORWARD, m)
        if backward:
            prev = b.marker("backward-begin", [prev], Phase.BACKWARD, m)
            for i in reversed(range(layers)):
                prev = b.add(NodeKind.COMPUTE, [prev], duration_us=bwd_us,
                             transient_bytes=transient_bytes,
                             persistent_delta_bytes=-activation_bytes,
                             refs=(params[i].id,), phase=Phase.BACKWARD, micro_step=m)
                if reduce_scatter and m == accumulation_steps - 1:
                    b.add(NodeKind.REDUCE_SCATTER, [prev], refs=(params[i].id,),
                          phase=Phase.BACKWARD, micro_step=m)
            prev = b.marker("backward-end", [prev], Phase.BACKWARD, m)
    last = accumulation_steps - 1
    step_deps = [prev] + [n.id for n in b.nodes if n.kind is NodeKind.REDUCE_SCATTER]
    prev = b.add(NodeKind.OPTIMIZER_STEP, step_deps, duration_us=optimizer_step_us,
                 phase=Phase.STEP, micro_step=last)
    b.marker("step-end", [prev], Phase.STEP, last)

    total_opt = int(Fraction(str(optimizer_multiplier)) * sum(sizes))
    frags = []
    if total_opt > 0:
        count = min(fragments, total_opt)
        frags = [OptimizerStateFragment(f"os{i}", s)
                 for i, s in enumerate(split_evenly(total_opt, count))]
    return Graph.build(b.nodes, params, frags)


def random_workload(rng: random.Random, max_compute: int = 64) -> Graph:
    """Random forward/backward DAG with markers, for property and stress tests.

    Forward nodes depend on random earlier forward nodes; each backward node
    mirrors one forward node (same parameters, opposite activation delta) and
    depends on it plus random earlier backward nodes.
    """
    n_micro = rng.randint(1, 3)
    per_micro = rng.randint(1, max(1, max_compute // (2 * n_micro)))
    n_params = rng.randint(1, 8)
    params = [Parameter(f"p{i}", rng.randint(1, 64) * 1_000_000) for i in range(n_params)]
    pids = [p.id for p in params]
    refs_of = [tuple(rng.sample(pids, rng.randint(0, min(2, n_params)))) for _ in range(per_micro)]
    act = [rng.randint(0, 32) * 1_000_000 for _ in range(per_micro)]

    b = _Builder()
    prev = None
    for m in range(n_micro):
        fb = b.marker("forward-begin", [prev] if prev is not None else [], Phase.FORWARD, m)
        fwd = []
        for j in range(per_micro):
            deps = {fb} | {f for f in fwd if rng.random() < 0.3}
            fwd.append(b.add(NodeKind.COMPUTE, deps, duration_us=rng.randint(10, 2000),
                             transient_bytes=rng.randint(0, 8) * 1_000_000,
                             persistent_delta_bytes=act[j], refs=refs_of[j],
                             phase=Phase.FORWARD, micro_step=m))
        fe = b.marker("forward-end", fwd, Phase.FORWARD, m)
        bb = b.marker("backward-begin", [fe], Phase.BACKWARD, m)
        bwd = []
        for j in reversed(range(per_micro)):
            deps = {bb, fwd[j]} | {x for x in bwd if rng.random() < 0.3}
            bwd.append(b.add(NodeKind.COMPUTE, deps, duration_us=rng.randint(10, 4000),
                             transient_bytes=rng.randint(0, 8) * 1_000_000,
                             persistent_delta_bytes=-act[j], refs=refs_of[j],
                             phase=Phase.BACKWARD, micro_step=m))
        prev = b.marker("backward-end", bwd, Phase.BACKWARD, m)
    step = b.add(NodeKind.OPTIMIZER_STEP, [prev], duration_us=rng.randint(0, 500),
                 phase=Phase.STEP, micro_step=n_micro - 1)
    b.marker("step-end", [step], Phase.STEP, n_micro - 1)
    frags = [OptimizerStateFragment(f"os{i}", rng.randint(1, 32) * 1_000_000)
             for i in range(rng.randint(1, 8))]
    return Graph.build(b.nodes, params, frags)


def random_topological_order(graph: Graph, rng: random.Random) -> Schedule:
    indeg = {nid: len(n.deps) for nid, n in graph.nodes.items()}
    users: dict[int, list[int]] = {nid: [] for nid in graph.nodes}
    for n in graph.nodes.values():
        for d in sorted(n.deps):
            users[d].append(n.id)
    ready = sorted(nid for nid, k in indeg.items() if k == 0)
    order = []
    while ready:
        nid = ready.pop(rng.randrange(len(ready)))
        order.append(nid)
        for u in users[nid]:
            indeg[u] -= 1
            if indeg[u] == 0:
                ready.append(u)
    return Schedule(tuple(order), ("random",))


def demo_workload():
    """Offload demo: optimizer state pushes an 8-layer, 2-micro-step model past its limit.

    Returns ``(graph, cluster, cost)``.
    """
    from .cost_model import GiB, MiB, ClusterConfig, CostModel

    graph = generate_workload(8, 20_000, 256 * MiB, 2, activation_bytes=512 * MiB,
                              optimizer_step_us=5_000, fragments=32)
    cluster = ClusterConfig(device_memory_bytes=16 * GiB, memory_limit=7 * GiB)
    return graph, cluster, CostModel()
