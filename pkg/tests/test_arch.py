import json

import numpy as np
import pytest

from branchgate.arch import (
    PRESETS,
    ArchSpec,
    GateTrace,
    aggregate,
    build_network,
    count_parameters,
    load_arch,
    parse_arch_spec,
    resnext_forward,
    spec_parameter_count,
)
from branchgate.errors import ConfigError, GateError, ShapeError
from branchgate.tensor import Tensor, relu
from conftest import randomize_bn
from oracles import alive_by_paths, block_param_count, resnext_module


@pytest.mark.parametrize(
    "name,target",
    [("cifar-{20,4,8}", 0.28e6), ("cifar-{29,8,8}", 0.86e6), ("cifar-{29,64,8}", 34.4e6)],
)
def test_preset_parameter_counts_within_five_percent(name, target):
    assert abs(spec_parameter_count(PRESETS[name]) - target) <= 0.05 * target


@pytest.mark.parametrize("name", ["toy-{11,2,4}", "cifar-{20,4,8}", "cifar-{29,8,8}", "mini-{20,4,8}"])
def test_built_count_matches_formula(name):
    net = build_network(PRESETS[name])
    assert count_parameters(net, "train") == spec_parameter_count(PRESETS[name])


def test_parameter_count_ignores_fan_in():
    base = PRESETS["cifar-{20,4,8}"]
    counts = {spec_parameter_count(base.with_fan_in(k)) for k in range(1, base.cardinality + 1)}
    assert len(counts) == 1


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_depth_formula(name):
    spec = PRESETS[name]
    assert spec.depth == 2 + 3 * spec.num_modules


def test_depth_mismatch_is_rejected():
    d = PRESETS["cifar-{29,8,8}"].to_dict()
    d["depth"] = 30
    with pytest.raises(ConfigError, match="2\\+3M"):
        ArchSpec.from_dict(d)


def test_fan_in_out_of_range():
    with pytest.raises(ConfigError):
        PRESETS["toy-{11,2,4}"].with_fan_in(5)
    with pytest.raises(ConfigError):
        PRESETS["toy-{11,2,4}"].with_fan_in(0)


def test_parse_json_round_trip():
    spec = PRESETS["mini-{29,8,8}"]
    assert parse_arch_spec(json.dumps(spec.to_dict())) == spec
    assert parse_arch_spec("cifar-{29,8,8}") is PRESETS["cifar-{29,8,8}"]


def test_parse_reports_missing_keys():
    with pytest.raises(ConfigError, match="cardinality"):
        parse_arch_spec('{"depth": 11}')
    with pytest.raises(ConfigError):
        parse_arch_spec("not a preset")


def test_load_arch_from_file(tmp_path):
    p = tmp_path / "arch.json"
    p.write_text(json.dumps(PRESETS["toy-{11,2,4}"].to_dict()))
    assert load_arch(str(p)) == PRESETS["toy-{11,2,4}"]
    with pytest.raises(ConfigError):
        load_arch(str(tmp_path / "missing.json"))


def test_same_seed_same_parameters():
    a = build_network(PRESETS["toy-{11,2,4}"], 7)
    b = build_network(PRESETS["toy-{11,2,4}"], 7)
    for (_, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_forward_shape_and_input_check(toy_net, rng):
    x = rng.normal(size=(2, 3, 16, 16)).astype(np.float32)
    assert toy_net.forward(x).shape == (2, 4)
    with pytest.raises(ShapeError):
        toy_net.forward(rng.normal(size=(2, 3, 8, 8)))


def test_full_gates_equal_plain_resnext(toy_net, rng):
    randomize_bn(toy_net, rng)
    toy_net.set_full_gates()
    x = rng.normal(size=(4, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(toy_net.forward(x).data, resnext_forward(toy_net, x).data)


def test_first_module_matches_float64_reference(toy_net, rng):
    randomize_bn(toy_net, rng)
    mod = toy_net.modules[0]
    x = rng.normal(size=(3, 8, 16, 16)).astype(np.float32)
    shared = Tensor(x)
    branches = mod.forward_branches({j: shared for j in mod.blocks}, False)
    got = relu(aggregate(branches, {k: 1 for k in branches}, mod.cardinality)).data
    np.testing.assert_allclose(got, resnext_module(x.astype(np.float64), mod), atol=1e-5)


def test_single_active_gate_passes_that_branch(small, rng):
    spec = small(cardinality=3, fan_in=1, modules=2)
    net = build_network(spec, 0, np.float64)
    net.freeze_gates()
    net.modules[1].gates[0].binary_gates = np.array([0, 1, 0], np.int8)
    trace = GateTrace()
    x = rng.normal(size=(2, *spec.input_shape))
    net.forward(x, True, trace=trace)
    r, s = trace.sources[0][1]
    xin, mass = trace.inputs[(1, 0)]
    assert mass == 1
    np.testing.assert_array_equal(xin.data, (r.data + s.data))


def test_dead_blocks_are_not_evaluated_but_outputs_agree(small, rng):
    spec = small(cardinality=3, fan_in=1, modules=3)
    net = build_network(spec, 0, np.float64)
    randomize_bn(net, rng)
    net.freeze_gates()
    for j, row in enumerate(([1, 0, 0], [1, 0, 0], [0, 1, 0])):
        net.modules[1].gates[j].binary_gates = np.array(row, np.int8)
    for j in range(3):
        net.modules[2].gates[j].binary_gates = np.array([1, 0, 0], np.int8)
    x = rng.normal(size=(2, *spec.input_shape))
    fast = net.forward(x).data
    traced = net.forward(x, trace=GateTrace()).data
    np.testing.assert_array_equal(fast, traced)
    gates = [[[1]] * 3] + [[mod.gates[j].binary_gates for j in range(3)] for mod in net.modules[1:]]
    assert net.alive_blocks() == alive_by_paths(gates, 3) == {(0, 0), (1, 0), (2, 0), (2, 1), (2, 2)}


def test_real_valued_one_hot_equals_binary(small, rng):
    spec = small(cardinality=3, fan_in=1, modules=2)
    net = build_network(spec, 0, np.float64)
    randomize_bn(net, rng)
    for j, gs in net.modules[1].gates.items():
        onehot = np.zeros(3)
        onehot[(j + 1) % 3] = 1
        gs.real_gates = onehot
        gs.binary_gates = onehot.astype(np.int8)
    x = rng.normal(size=(2, *spec.input_shape))
    np.testing.assert_allclose(net.forward(x, connectivity="real").data, net.forward(x).data, rtol=1e-12)


def test_real_valued_uniform_is_half_sum(small, rng):
    spec = small(cardinality=2, fan_in=1, modules=2)
    net = build_network(spec, 0, np.float64)
    for gs in net.modules[1].gates.values():
        gs.real_gates = np.array([0.5, 0.5])
    trace = GateTrace()
    net.forward(rng.normal(size=(2, *spec.input_shape)), True, "real", trace)
    (r0, s0), (r1, s1) = trace.sources[0][0], trace.sources[0][1]
    half = 0.5 * (r0.data + s0.data) + 0.5 * (r1.data + s1.data)
    block = net.modules[1].blocks[0]
    # block 0's input is relu(half-sum); recompute its residual from that input
    ref = block.residual(Tensor(np.maximum(half, 0)), True).data
    np.testing.assert_allclose(trace.sources[1][0][0].data, ref, rtol=1e-10, atol=1e-12)


def test_disconnected_last_module_raises(small, rng):
    spec = small(cardinality=2, fan_in=1, modules=2)
    net = build_network(spec)
    del net.modules[0].blocks[0], net.modules[0].blocks[1]
    with pytest.raises(GateError):
        net.forward(rng.normal(size=(1, *spec.input_shape)).astype(np.float32))


def test_test_mode_count_subtracts_dead_blocks(small):
    spec = small(cardinality=3, fan_in=1, modules=3)
    net = build_network(spec)
    net.freeze_gates()
    for j in range(3):
        net.modules[1].gates[j].binary_gates = np.array([1, 0, 0], np.int8)
        net.modules[2].gates[j].binary_gates = np.eye(3, dtype=np.int8)[j]
    dead = [(0, 1), (0, 2)]
    removed = sum(block_param_count(net.modules[i].blocks[j]) for i, j in dead)
    assert count_parameters(net, "test") == count_parameters(net, "train") - removed
