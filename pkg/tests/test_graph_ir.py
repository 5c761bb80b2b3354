import random

import pytest

from helpers import chain_graph, structure_violations
from shardsched.errors import DependencyViolation, UnusedParameter
from shardsched.graph_ir import (Graph, Node, NodeKind, Parameter, Phase, Schedule, first_last_use,
                                 initial_schedule, insert_after, insert_before, natural_key,
                                 placement_violations, remove, topological_order, validate)
from shardsched.workload import generate_workload, random_topological_order, random_workload


def test_validate_empty():
    assert validate(Graph({}), Schedule(())) == []


def test_validate_inversion():
    g = Graph.build([Node(0, NodeKind.COMPUTE), Node(1, NodeKind.COMPUTE, deps={0})])
    v = validate(g, Schedule((1, 0)))
    assert len(v) == 1
    assert (v[0].kind, v[0].node, v[0].dep) == ("dependency_inversion", 1, 0)


def test_validate_missing_duplicate_unknown():
    g = Graph.build([Node(0, NodeKind.COMPUTE), Node(1, NodeKind.COMPUTE)])
    kinds = sorted(v.kind for v in validate(g, Schedule((0, 0, 7))))
    assert kinds == ["duplicate", "missing", "unknown"]


def test_random_orders_are_valid():
    rng = random.Random(11)
    for _ in range(1000):
        g = random_workload(rng)
        s = random_topological_order(g, rng)
        assert validate(g, s) == []
        assert structure_violations(g, s) == []


def test_cycle_rejected():
    with pytest.raises(ValueError, match="cycle"):
        Graph.build([Node(0, NodeKind.COMPUTE, deps={1}), Node(1, NodeKind.COMPUTE, deps={0})])


def test_unknown_dep_and_ref_rejected():
    with pytest.raises(ValueError):
        Graph.build([Node(0, NodeKind.COMPUTE, deps={5})])
    with pytest.raises(ValueError):
        Graph.build([Node(0, NodeKind.COMPUTE, refs=("nope",))])


def test_node_invariants():
    with pytest.raises(ValueError):
        Node(0, NodeKind.RELEASE)
    with pytest.raises(ValueError):
        Node(0, NodeKind.ALLGATHER)
    with pytest.raises(ValueError):
        Node(0, NodeKind.MARKER, label="forward-begin", duration_us=3)
    with pytest.raises(ValueError):
        Node(0, NodeKind.MARKER, label="middle")
    with pytest.raises(ValueError):
        Node(0, NodeKind.TRANSFER_SYNC, refs=("os0",))


def test_parameter_invariants():
    assert Parameter("p", 10, 3).shard_bytes == 4
    with pytest.raises(ValueError):
        Parameter("p", 0)
    with pytest.raises(ValueError):
        Parameter("p", 5, 0)


def test_kind_parse():
    assert NodeKind.parse("AllGather") is NodeKind.ALLGATHER
    assert NodeKind.parse("reduce-scatter") is NodeKind.REDUCE_SCATTER
    assert NodeKind.parse("TransferSync") is NodeKind.TRANSFER_SYNC


def test_natural_key():
    assert sorted(["p10", "p2", "p1"], key=natural_key) == ["p1", "p2", "p10"]


def test_topological_tie_break_by_id():
    g = Graph.build([Node(i, NodeKind.COMPUTE) for i in (3, 1, 2)])
    assert topological_order(g) == [1, 2, 3]


def _uses(positions, n=10):
    specs = [(NodeKind.COMPUTE, {"refs": ("p",) if i in positions else ()}) for i in range(n)]
    return chain_graph(specs, [Parameter("p", 8)])


def test_first_last_use_span():
    g = _uses({3, 7})
    assert first_last_use(g, initial_schedule(g), "p") == {(Phase.FORWARD, 0): (3, 7)}


def test_first_last_use_single():
    g = _uses({5})
    assert first_last_use(g, initial_schedule(g), "p") == {(Phase.FORWARD, 0): (5, 5)}


def test_first_last_use_unused():
    g = _uses(set())
    with pytest.raises(UnusedParameter):
        first_last_use(g, initial_schedule(g), "p")


def test_first_last_use_layered():
    g = generate_workload(4, 100, 10)
    s = initial_schedule(g)
    spans = first_last_use(g, s, "p2")
    # forward-begin f0 f1 f2 f3 forward-end backward-begin b3 b2 ...
    assert spans == {(Phase.FORWARD, 0): (3, 3), (Phase.BACKWARD, 0): (8, 8)}
    assert g[s.order[3]].refs == ("p2",) and g[s.order[8]].refs == ("p2",)


def test_insert_and_remove():
    g = Graph.build([Node(0, NodeKind.COMPUTE), Node(1, NodeKind.COMPUTE, deps={0}),
                     Node(2, NodeKind.COMPUTE, deps={0})])
    s = Schedule((0, 1))
    assert insert_after(g, s, 2, 0).order == (0, 2, 1)
    assert insert_before(g, s, 2, 1).order == (0, 2, 1)
    with pytest.raises(DependencyViolation):
        insert_before(g, s, 2, 0)
    assert remove(s, 1).order == (0,)


def test_insert_before_dependent():
    g = Graph.build([Node(0, NodeKind.COMPUTE), Node(1, NodeKind.COMPUTE, deps={0})])
    with pytest.raises(DependencyViolation):
        insert_after(g, Schedule((1,)), 0, 1)


def test_placement_violations_detects_early_release():
    params = [Parameter("p", 8)]
    g = chain_graph([(NodeKind.ALLGATHER, {"refs": ("p",)}), (NodeKind.RELEASE, {"refs": ("p",)}),
                     (NodeKind.COMPUTE, {"refs": ("p",), "deps": {0}})], params)
    s = Schedule((0, 1, 2))
    assert placement_violations(g, s)
    assert structure_violations(g, s)
