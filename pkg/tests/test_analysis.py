import json

import numpy as np
import pytest

from branchgate.analysis import (
    branch_histogram,
    build_graph,
    compute_alive,
    export_graph,
    graph_from_json,
    prune,
)
from branchgate.arch import build_network, count_parameters
from branchgate.errors import GateError
from conftest import randomize_bn
from oracles import alive_by_paths, block_param_count


def _set_gates(net, rows):
    """``rows[i - 1][j]`` is the binary gate of block ``j`` in module ``i``."""
    net.freeze_gates()
    for i, mod_rows in enumerate(rows, start=1):
        for j, row in enumerate(mod_rows):
            net.modules[i].gates[j].binary_gates = np.array(row, np.int8)


def _random_pattern(rng, c, k, modules):
    rows = []
    for _ in range(modules - 1):
        mod = []
        for _ in range(c):
            g = np.zeros(c, np.int8)
            g[rng.choice(c, size=k, replace=False)] = 1
            mod.append(g)
        rows.append(mod)
    return rows


def test_unfrozen_gates_rejected(toy_net):
    with pytest.raises(GateError):
        build_graph(toy_net)


def test_full_gates_complete_bipartite(toy_net):
    toy_net.set_full_gates()
    g = build_graph(toy_net)
    c, m = 4, 3
    assert len(g.edges) == (m - 1) * c * c
    assert len(g.alive) == m * c
    assert branch_histogram(g) == [c] * m


def test_block_without_out_edges_is_dead(small):
    net = build_network(small(cardinality=3, modules=3))
    _set_gates(net, [[[1, 0, 0], [1, 0, 0], [0, 1, 0]], [[1, 0, 0], [0, 1, 0], [0, 1, 0]]])
    g = build_graph(net)
    assert not g.is_alive(0, 2)  # zero out-degree
    assert not g.is_alive(1, 2)
    assert not g.is_alive(0, 1)  # feeds only the dead b2
    assert g.is_alive(1, 1) and g.is_alive(0, 0)


def test_hand_drawn_chain(small):
    # 3 modules, C=3, K=1. Module 1: b0<-a1, b1<-a1, b2<-a2. Module 2: c0<-b0, c1<-b0, c2<-b1.
    # a0 has no out-edge; b2 has no out-edge so a2 dies with it. Hand count: a1; b0, b1; c0, c1, c2.
    net = build_network(small(cardinality=3, modules=3))
    _set_gates(net, [[[0, 1, 0], [0, 1, 0], [0, 0, 1]], [[1, 0, 0], [1, 0, 0], [0, 1, 0]]])
    g = build_graph(net)
    assert g.alive == {(0, 1), (1, 0), (1, 1), (2, 0), (2, 1), (2, 2)}
    assert branch_histogram(g) == [1, 2, 3]


def test_alive_matches_path_enumeration(small, rng):
    for _ in range(20):
        c = int(rng.integers(2, 5))
        k = int(rng.integers(1, c + 1))
        net = build_network(small(cardinality=c, fan_in=k, modules=4))
        rows = _random_pattern(rng, c, k, 4)
        _set_gates(net, rows)
        gates = [[[1]] * c] + rows
        assert build_graph(net).alive == alive_by_paths(gates, c) == net.alive_blocks()


def test_alive_is_idempotent(small, rng):
    net = build_network(small(cardinality=3, modules=3))
    _set_gates(net, _random_pattern(rng, 3, 1, 3))
    g = build_graph(net)
    assert compute_alive(g.nodes, g.edges, g.num_modules) == g.alive


def test_prune_is_exact_and_idempotent(small, rng):
    spec = small(cardinality=3, fan_in=1, modules=3)
    for trial in range(5):
        net = build_network(spec, trial)
        randomize_bn(net, rng)
        _set_gates(net, _random_pattern(rng, 3, 1, 3))
        pruned = prune(net)
        x = rng.normal(size=(100, *spec.input_shape)).astype(np.float32)
        np.testing.assert_array_equal(net.predict(x), pruned.predict(x))
        twice = prune(pruned)
        assert [sorted(m.blocks) for m in twice.modules] == [sorted(m.blocks) for m in pruned.modules]
        dead = {(i, j) for i, m in enumerate(net.modules) for j in m.blocks} - build_graph(net).alive
        removed = sum(block_param_count(net.modules[i].blocks[j]) for i, j in dead)
        assert count_parameters(net, "train") - count_parameters(pruned, "train") == removed
        assert count_parameters(pruned, "train") == count_parameters(net, "test")


def test_prune_without_dead_blocks_is_identity(toy_net):
    toy_net.set_full_gates()
    assert count_parameters(prune(toy_net)) == count_parameters(toy_net)


def test_histogram_sum_matches_alive(small, rng):
    net = build_network(small(cardinality=4, fan_in=2, modules=4))
    _set_gates(net, _random_pattern(rng, 4, 2, 4))
    g = build_graph(net)
    assert sum(branch_histogram(g)) == len(g.alive) == sum(1 for n in g.nodes if g.is_alive(*n))
    assert all(0 <= h <= 4 for h in branch_histogram(g))


def test_export_deterministic_and_round_trip(small, rng):
    net = build_network(small(cardinality=3, modules=3))
    _set_gates(net, _random_pattern(rng, 3, 2, 3))
    g = build_graph(net)
    for fmt in ("dot", "json"):
        assert export_graph(g, fmt) == export_graph(g, fmt)
    back = graph_from_json(export_graph(g, "json"))
    assert back == g
    d = json.loads(export_graph(g, "json"))
    assert sorted(d["edges"]) == d["edges"]
    assert d["nodes"][0] == {"module": 0, "block": 0, "alive": g.is_alive(0, 0)}


def test_edges_biject_with_gates(small, rng):
    net = build_network(small(cardinality=4, fan_in=2, modules=3))
    _set_gates(net, _random_pattern(rng, 4, 2, 3))
    edges = set(build_graph(net).edges)
    from_gates = {
        (i - 1, k, i, j)
        for i in range(1, 3)
        for j, gs in net.modules[i].gates.items()
        for k in range(4)
        if gs.binary_gates[k] == 1
    }
    assert edges == from_gates


def test_dot_marks_dead_nodes_dashed_and_parses(small):
    pydot = pytest.importorskip("pydot")
    net = build_network(small(cardinality=3, modules=3))
    _set_gates(net, [[[0, 1, 0], [0, 1, 0], [0, 0, 1]], [[1, 0, 0], [1, 0, 0], [0, 1, 0]]])
    text = export_graph(build_graph(net), "dot")
    assert 'm0_b0 [label="0:0", style=dashed]' in text
    (graph,) = pydot.graph_from_dot_data(text)
    assert len(graph.get_subgraphs()) == 3


def test_dot_without_gate_edges(small):
    pydot = pytest.importorskip("pydot")
    net = build_network(small(cardinality=2, modules=1))
    net.freeze_gates()
    g = build_graph(net)
    assert g.edges == ()
    (graph,) = pydot.graph_from_dot_data(export_graph(g, "dot"))
    assert graph.get_name() == "connectivity"


def test_json_with_inconsistent_alive_flags_rejected(toy_net):
    toy_net.set_full_gates()
    d = json.loads(export_graph(build_graph(toy_net), "json"))
    d["nodes"][0]["alive"] = False
    with pytest.raises(GateError):
        graph_from_json(json.dumps(d))
