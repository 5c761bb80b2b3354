import random

from hypothesis import given, settings, strategies as st

from helpers import MB, random_instance, structure_violations
from shardsched.cost_model import ClusterConfig, CostModel
from shardsched.graph_ir import NodeKind, Parameter, Schedule, validate
from shardsched.passes import apply_sharding, gathered_params, select_unshard
from shardsched.simulator import MemoryProfile, simulate
from shardsched.workload import random_topological_order

seeds = st.integers(0, 2**32 - 1)
COST = CostModel()
CLUSTER = ClusterConfig(device_memory_bytes=10**13)


def hoist_gathers(graph, order, rng):
    """Move random gathers earlier without changing the relative order of gathers."""
    order = list(order)
    for i in range(len(order)):
        if graph[order[i]].kind is not NodeKind.ALLGATHER or rng.random() < 0.5:
            continue
        lo = i
        while lo > 0 and graph[order[lo - 1]].kind is not NodeKind.ALLGATHER:
            lo -= 1
        j = rng.randint(lo, i)
        order.insert(j, order.pop(i))
    return order


@settings(max_examples=150, deadline=None)
@given(seeds)
def test_earlier_gathers_never_hurt(seed):
    rng = random.Random(seed)
    g = random_instance(rng)
    sh = apply_sharding(g, random_topological_order(g, rng), CLUSTER)
    moved = Schedule(tuple(hoist_gathers(sh.graph, sh.schedule.order, rng)))
    assert validate(sh.graph, moved) == []
    a = simulate(sh.graph, sh.schedule, COST, CLUSTER).iteration_time_us
    b = simulate(sh.graph, moved, COST, CLUSTER).iteration_time_us
    assert b <= a


@settings(max_examples=150, deadline=None)
@given(seeds)
def test_sharding_preserves_validity_and_memory(seed):
    rng = random.Random(seed)
    g = random_instance(rng)
    sh = apply_sharding(g, random_topological_order(g, rng), CLUSTER)
    assert validate(sh.graph, sh.schedule) == []
    assert structure_violations(sh.graph, sh.schedule) == []
    rep = simulate(sh.graph, sh.schedule, COST, CLUSTER)
    assert rep.final_memory_bytes == rep.initial_memory_bytes
    per_param = {}
    for n in sh.graph.nodes.values():
        if n.kind in (NodeKind.ALLGATHER, NodeKind.RELEASE):
            key = (n.refs[0], n.region)
            per_param.setdefault(key, [0, 0])[n.kind is NodeKind.RELEASE] += 1
    assert all(v == [1, 1] for v in per_param.values())


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(1, 500), min_size=1, max_size=12, unique=True),
       st.integers(0, 3000), st.integers(0, 200), st.integers(1, 10**5))
def test_unshard_selects_ascending_prefix(sizes_mb, budget_mb, latency, bw_mb):
    params = [Parameter(f"p{i}", s * MB) for i, s in enumerate(sizes_mb)]
    cost = CostModel(collective_latency_us=latency, collective_bandwidth=bw_mb * 1e6)
    prof = MemoryProfile({}, 1000 * MB)
    cluster = ClusterConfig(device_memory_bytes=10**13, memory_limit=(1000 + budget_mb) * MB)
    sel = select_unshard(params, prof, cluster, cost)
    by_size = [p.id for p in sorted(params, key=lambda p: p.size_bytes)]
    assert list(sel.selected) == by_size[:len(sel.selected)]


@settings(max_examples=100, deadline=None)
@given(seeds)
def test_gathered_params_are_sharded(seed):
    rng = random.Random(seed)
    g = random_instance(rng)
    sh = apply_sharding(g, random_topological_order(g, rng), CLUSTER)
    used = {r for n in g.nodes.values() if n.kind is NodeKind.COMPUTE for r in n.refs}
    assert {p.id for p in gathered_params(sh.graph)} == used
