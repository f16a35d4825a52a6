import hashlib

import numpy as np
import pytest

from branchgate import rng as rngmod
from branchgate.arch import build_network
from branchgate.data import iterate_batches, synth_splits
from branchgate.errors import ConfigError, DivergenceError, GateError
from branchgate.trainer import (
    OptimizerState,
    Phase,
    TrainSchedule,
    apply_fixed_random_gates,
    eval_connectivity,
    evaluate,
    load_schedule,
    make_fixed_random_gates,
    real_valued_forward,
    run_schedule,
    sgd_update,
    train_step,
)
from branchgate.gates import freeze_top_k
from branchgate.tensor import Tensor
from oracles import plain_resnext_losses


@pytest.fixture(scope="module")
def tiny_data():
    return synth_splits(4, 8, 4, 16, seed=3)


def _batch(net, n=8, seed=0):
    r = np.random.default_rng(seed)
    x = r.normal(size=(n, *net.spec.input_shape)).astype(net.dtype)
    return x, r.integers(0, net.spec.num_classes, size=n)


def _snapshot(net):
    params = {k: p.data.copy() for k, p in net.named_parameters()}
    gates = {k: (g.real_gates.copy(), g.binary_gates.copy()) for k, g in net.gate_states()}
    return params, gates


def _gate_checksum(net):
    h = hashlib.sha256()
    for _, gs in net.gate_states():
        h.update(gs.real_gates.tobytes())
        h.update(gs.binary_gates.tobytes())
    return h.hexdigest()


# -- sgd ----------------------------------------------------------------------


def test_sgd_lr_zero_keeps_param_but_fills_buffer():
    p = Tensor(np.array([1.0, 2.0]))
    opt = OptimizerState()
    sgd_update(p, np.array([1.0, 1.0]), opt, 0.0, "w")
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert "w" in opt.buffers and np.any(opt.buffers["w"] != 0)


def test_sgd_plain_gradient_descent():
    p = Tensor(np.array([1.0, 2.0]))
    sgd_update(p, np.array([0.5, -1.0]), OptimizerState(0.0, 0.0), 0.1, "w")
    np.testing.assert_allclose(p.data, [0.95, 2.1])


def test_sgd_two_steps_closed_form():
    m, lr, g = 0.9, 0.1, np.array([1.0, -2.0])
    p = Tensor(np.zeros(2))
    opt = OptimizerState(m, 0.0)
    sgd_update(p, g, opt, lr, "w")
    sgd_update(p, g, opt, lr, "w")
    np.testing.assert_allclose(p.data, -lr * (2 + m) * g)


def test_sgd_weight_decay_term():
    p = Tensor(np.array([2.0]))
    sgd_update(p, np.array([0.0]), OptimizerState(0.0, 0.5), 0.1, "w")
    np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])


# -- schedules ----------------------------------------------------------------


def test_reference_schedule_and_scaling():
    s = TrainSchedule.reference("cifar")
    assert [p.epochs for p in s.phases] == [120, 100, 50, 50]
    assert s.total_epochs == 320
    assert [p.weight_lr for p in s.phases] == [0.1, 0.1, 0.01, 0.001]
    assert s.phases[0].gate_lr == 0.2 and s.phases[0].mode == "learned"
    assert all(p.mode == "frozen_topk" and p.gate_lr == 0 for p in s.phases[1:])
    assert [p.epochs for p in s.scaled(0.125).phases] == [15, 12, 6, 6]
    assert [p.epochs for p in s.scaled(0.001).phases] == [1, 1, 1, 1]
    assert [p.weight_lr for p in s.scaled(0.5).phases] == [0.1, 0.1, 0.01, 0.001]


def test_schedule_json_round_trip():
    s = TrainSchedule.reference("cifar", "real_valued")
    assert TrainSchedule.from_json(s.to_json()).phases == s.phases


def test_frozen_phase_needs_gates():
    with pytest.raises(ConfigError):
        TrainSchedule([Phase(1, 0.1, 0.0, "frozen_topk")]).validate()
    with pytest.raises(ConfigError):
        TrainSchedule([Phase(1, 0.1, 0.0, "sideways")]).validate()
    TrainSchedule([Phase(1, 0.1, 0.0, "full"), Phase(1, 0.1, 0.0, "full")]).validate()


def test_load_schedule_presets(tmp_path):
    assert load_schedule("reference-full").phases[0].mode == "full"
    assert load_schedule("reference-imagenet").total_epochs == 120
    assert load_schedule("reference-fixed_random").phases[-1].mode == "fixed_random"
    with pytest.raises(ConfigError):
        load_schedule(str(tmp_path / "none.json"))
    bad = tmp_path / "bad.json"
    bad.write_text('[{"epochs": 1}]')
    with pytest.raises(ConfigError):
        load_schedule(str(bad))


# -- fixed random gates -------------------------------------------------------


def test_fixed_random_k_equals_c():
    np.testing.assert_array_equal(make_fixed_random_gates(5, 5, 123, 3), np.ones((3, 5)))


def test_fixed_random_deterministic_with_k_active():
    a = make_fixed_random_gates(8, 4, 9, 6)
    np.testing.assert_array_equal(a, make_fixed_random_gates(8, 4, 9, 6))
    assert np.all(a.sum(axis=1) == 4)
    with pytest.raises(GateError):
        make_fixed_random_gates(3, 4, 0)


def test_fixed_random_selection_frequency():
    n = 10_000
    freq = np.mean([make_fixed_random_gates(8, 4, s)[0] for s in range(n)], axis=0)
    assert np.all(np.abs(freq - 0.5) <= 3 * np.sqrt(0.25 / n))


# -- train_step ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["learned", "full", "real_valued"])
def test_null_update_changes_nothing(toy_net, mode):
    batch = _batch(toy_net)
    toy_net.freeze_gates() if mode == "frozen_topk" else None
    train_step(toy_net, batch, Phase(1, 0.0, 0.0, mode), OptimizerState(), rngmod.stream(0, "gates", 0))
    params, _ = _snapshot(toy_net)
    gates = {k: g.real_gates.copy() for k, g in toy_net.gate_states()}
    train_step(toy_net, batch, Phase(1, 0.0, 0.0, mode), OptimizerState(), rngmod.stream(0, "gates", 1))
    for k, p in toy_net.named_parameters():
        np.testing.assert_array_equal(p.data, params[k])
    for k, g in toy_net.gate_states():
        np.testing.assert_array_equal(g.real_gates, gates[k])


def test_learned_step_uses_k_active_gates(toy_net):
    batch = _batch(toy_net)
    opt = OptimizerState()
    for s in range(3):
        train_step(toy_net, batch, Phase(1, 0.1, 0.2, "learned"), opt, rngmod.stream(0, "gates", s))
        assert all(gs.binary_gates.sum() == toy_net.spec.fan_in for _, gs in toy_net.gate_states())
    assert any(np.any(gs.real_gates != 0.25) for _, gs in toy_net.gate_states())


def test_full_mode_matches_plain_resnext_loop(toy_spec):
    net_a = build_network(toy_spec, 5)
    net_b = build_network(toy_spec, 5)
    batches = [_batch(net_a, 8, s) for s in range(3)]
    opt = OptimizerState()
    losses = [
        train_step(net_a, b, Phase(1, 0.1, 0.0, "full"), opt, rngmod.stream(0, "gates", s), s)
        for s, b in enumerate(batches)
    ]
    assert losses == plain_resnext_losses(net_b, batches, 0.1)
    for (_, p), (_, q) in zip(net_a.named_parameters(), net_b.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_divergence_raises_with_step(toy_net):
    x, y = _batch(toy_net)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(DivergenceError) as exc:
        train_step(toy_net, (x, y), Phase(1, 0.1, 0.2, "learned"), OptimizerState(), rngmod.stream(0, "g"), 17)
    assert exc.value.step == 17


def test_real_valued_forward_leaves_gate_gradients(toy_net):
    toy_net.set_connectivity("real_valued")
    loss, gates = real_valued_forward(toy_net, _batch(toy_net))
    assert np.isfinite(loss)
    assert len(gates) == 8 and all(g.grad is not None and g.grad.shape == (4,) for g in gates.values())


def test_eval_connectivity_restores_sampled_gates(toy_net):
    toy_net.set_connectivity("learned")
    rng = rngmod.stream(0, "gates", 0)
    for _, gs in toy_net.gate_states():
        gs.real_gates = rng.uniform(size=4).astype(np.float32)
        gs.sample(rng)
    before = {k: g.binary_gates.copy() for k, g in toy_net.gate_states()}
    with eval_connectivity(toy_net):
        for _, gs in toy_net.gate_states():
            np.testing.assert_array_equal(gs.binary_gates, freeze_top_k(gs.real_gates, 2))
    for k, g in toy_net.gate_states():
        np.testing.assert_array_equal(g.binary_gates, before[k])


# -- run_schedule ---------------------------------------------------------------


def test_zero_epoch_schedule_returns_unchanged(toy_net, tiny_data):
    before, gates = _snapshot(toy_net)
    net, metrics, _ = run_schedule(toy_net, tiny_data[0], TrainSchedule([Phase(0, 0.1, 0.2, "learned")]), 0)
    assert metrics.records == []
    for k, p in net.named_parameters():
        np.testing.assert_array_equal(p.data, before[k])


def test_schedule_freezes_once_and_keeps_gates(toy_spec, tiny_data):
    train, test = tiny_data
    schedule = TrainSchedule(
        [Phase(1, 0.1, 0.2, "learned"), Phase(1, 0.1, 0.0, "frozen_topk"), Phase(1, 0.01, 0.0, "frozen_topk")]
    )
    checksums = []

    def hook(net, state, opt, record):
        checksums.append((state.phase_index, _gate_checksum(net)))

    net = build_network(toy_spec, 0)
    net, metrics, _ = run_schedule(net, train, schedule, 0, eval_data=test, batch_size=16, on_epoch_end=hook)
    assert net.connectivity == "frozen"
    assert checksums[1][1] == checksums[2][1]
    for _, gs in net.gate_states():
        top = np.argsort(-gs.real_gates, kind="stable")[: gs.fan_in]
        assert set(np.flatnonzero(gs.binary_gates)) == set(top)
    assert len(metrics.records) == 3
    assert all(np.isfinite(r["loss"]) for r in metrics.records)
    assert set(metrics.records[0]) == {"phase", "epoch", "loss", "eval_acc", "gate_entropy", "seconds"}


def test_run_is_reproducible(toy_spec, tiny_data):
    schedule = TrainSchedule([Phase(1, 0.1, 0.2, "learned"), Phase(1, 0.1, 0.0, "frozen_topk")])
    runs = []
    for _ in range(2):
        net, metrics, _ = run_schedule(build_network(toy_spec, 1), tiny_data[0], schedule, 4, batch_size=16)
        runs.append((_snapshot(net)[0], metrics.losses))
    assert runs[0][1] == runs[1][1]
    for k in runs[0][0]:
        np.testing.assert_array_equal(runs[0][0][k], runs[1][0][k])


def test_resume_matches_uninterrupted(toy_spec, tiny_data):
    schedule = TrainSchedule([Phase(2, 0.1, 0.2, "learned"), Phase(1, 0.1, 0.0, "frozen_topk")])
    full, m_full, _ = run_schedule(build_network(toy_spec, 0), tiny_data[0], schedule, 2, batch_size=16)
    opt = OptimizerState()
    part, m1, state = run_schedule(build_network(toy_spec, 0), tiny_data[0], schedule, 2, batch_size=16,
                                   optimizer=opt, max_epochs=1)
    part, m2, _ = run_schedule(part, tiny_data[0], schedule, 2, optimizer=opt, state=state)
    assert m1.losses + m2.losses == m_full.losses
    for (_, p), (_, q) in zip(full.named_parameters(), part.named_parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_fixed_random_schedule_never_changes_gates(toy_spec, tiny_data):
    net = build_network(toy_spec, 0)
    schedule = TrainSchedule([Phase(2, 0.1, 0.0, "fixed_random")])
    seen = []
    run_schedule(net, tiny_data[0], schedule, 3, batch_size=16,
                 on_epoch_end=lambda n, s, o, r: seen.append(_gate_checksum(n)))
    assert seen[0] == seen[1]
    ref = make_fixed_random_gates(4, 2, 3, 8)
    for row, (_, gs) in zip(ref, net.gate_states()):
        np.testing.assert_array_equal(gs.binary_gates, row)


def test_fixed_random_requires_drawn_gates(toy_net):
    with pytest.raises(GateError):
        train_step(toy_net, _batch(toy_net), Phase(1, 0.1, 0.0, "fixed_random"), OptimizerState(),
                   rngmod.stream(0, "g"))
    apply_fixed_random_gates(toy_net, 0)
    train_step(toy_net, _batch(toy_net), Phase(1, 0.1, 0.0, "fixed_random"), OptimizerState(), rngmod.stream(0, "g"))


def test_evaluate_uses_mean_subtracted_images(toy_net, tiny_data):
    _, test = tiny_data
    acc = evaluate(toy_net, test)
    logits = toy_net.predict(test.normalized())
    assert acc == float((logits.argmax(axis=1) == test.labels).mean())


def test_batches_are_deterministic(tiny_data):
    a = list(iterate_batches(tiny_data[0], 8, 1, 0))
    b = list(iterate_batches(tiny_data[0], 8, 1, 0))
    for (xa, ya), (xb, yb) in zip(a, b):
        np.testing.assert_array_equal(xa, xb)
        np.testing.assert_array_equal(ya, yb)


@pytest.mark.slow
def test_desk_run_reduces_loss(toy_spec):
    train, test = synth_splits(4, 50, 25, 16, seed=0)
    schedule = TrainSchedule.reference("cifar").scaled(30 / 320)
    assert schedule.total_epochs <= 30
    _, metrics, _ = run_schedule(build_network(toy_spec, 0), train, schedule, 0, batch_size=32)
    assert metrics.losses[-1] < metrics.losses[0]
