"""Finite-difference gradient suite run by ``branchgate gradcheck`` and the tests.

Everything is evaluated in float64 with central differences. Each check
returns the maximum relative error between tape and numerical gradients.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .arch import ArchSpec, GateTrace, StageSpec, build_network
from .gradcheck import check_tensors, max_relative_error, numerical_gradient
from .tensor import Tape, Tensor

TOLERANCE = 1e-4
EPS = 1e-6
# coordinates below this fraction of a tensor's largest gradient are compared on that scale
SCALE_FLOOR = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float

    @property
    def passed(self):
        return self.error < TOLERANCE


def _t(rng, *shape, positive=False):
    a = rng.normal(size=shape)
    if positive:
        a = rng.uniform(0.1, 1.0, size=shape)
    return Tensor(a, requires_grad=True)


def _primitive(name, fn, inputs, seed):
    proj_rng = np.random.default_rng(seed + 1000)
    r = None

    def loss():
        nonlocal r
        y = fn(*inputs)
        if y.data.ndim == 0:
            return y
        if r is None:
            r = Tensor(proj_rng.normal(size=y.shape))
        return T.sum_all(T.mul(y, r))

    errs = check_tensors(loss, inputs, EPS, scale_floor=SCALE_FLOOR)
    return CheckResult(name, max(errs.values()))


def primitive_checks(seed=0):
    rng = np.random.default_rng(seed)
    out = []

    def add(name, fn, inputs):
        out.append(_primitive(name, fn, inputs, seed + len(out)))

    add("add", T.add, [_t(rng, 2, 3), _t(rng, 2, 3)])
    add("add_n", lambda *ts: T.add_n(ts), [_t(rng, 4, 3) for _ in range(3)])
    add("scale", lambda a: T.scale(a, -1.7), [_t(rng, 5)])
    add("mul", T.mul, [_t(rng, 3, 2), _t(rng, 3, 2)])
    add("sum_all", T.sum_all, [_t(rng, 2, 2, 3)])
    # keep inputs away from the ReLU kink so central differences are exact
    x = rng.normal(size=(2, 3, 4))
    x[np.abs(x) < 0.05] = 0.5
    add("relu", T.relu, [Tensor(x, requires_grad=True)])
    add("weighted_sum", lambda w, a, b, c: T.weighted_sum(w, [a, b, c]), [_t(rng, 3)] + [_t(rng, 2, 4) for _ in range(3)])
    add("normalize", T.normalize, [_t(rng, 5, positive=True)])
    for method in ("im2col", "direct"):
        for stride, pad in ((1, 1), (2, 1), (1, 0)):
            add(
                f"conv2d[{method},s{stride},p{pad}]",
                lambda a, w, s=stride, p=pad, m=method: T.conv2d(a, w, s, p, m),
                [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 3, 3)],
            )
    add("conv2d[1x1,s2]", lambda a, w: T.conv2d(a, w, 2, 0), [_t(rng, 2, 3, 5, 5), _t(rng, 4, 3, 1, 1)])
    bn = T.BatchNormState(3, dtype=np.float64)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.normal(size=3)
    add("batch_norm[train]", lambda a, g, b: T.batch_norm(a, bn, True), [_t(rng, 4, 3, 3, 3), bn.gamma, bn.beta])
    bn.running_var[:] = rng.uniform(0.5, 2.0, 3)
    add("batch_norm[eval]", lambda a, g, b: T.batch_norm(a, bn, False), [_t(rng, 4, 3, 3, 3), bn.gamma, bn.beta])
    # distinct values avoid ties inside pooling windows
    pool_in = Tensor(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) * 0.1, requires_grad=True)
    add("max_pool2d", T.max_pool2d, [pool_in])
    add("global_avg_pool", T.global_avg_pool, [_t(rng, 2, 3, 4, 4)])
    add("linear", T.linear, [_t(rng, 3, 4), _t(rng, 5, 4), _t(rng, 5)])
    add("classifier_head", T.classifier_head, [_t(rng, 2, 4, 3, 3), _t(rng, 5, 4), _t(rng, 5)])
    labels = np.array([0, 3, 1])
    add("softmax_cross_entropy", lambda z: T.softmax_cross_entropy(z, labels), [_t(rng, 3, 4)])
    return out


def tiny_spec():
    """Two modules of two blocks, fan-in one."""
    return ArchSpec(
        depth=8,
        bottleneck_width=2,
        cardinality=2,
        fan_in=1,
        num_classes=3,
        stages=(StageSpec(1, 4, 2, 6, 1), StageSpec(1, 6, 3, 8, 2)),
        stem_channels=4,
        input_shape=(3, 6, 6),
        name="gradcheck-{8,2,2}",
    )


def _tiny_problem(seed):
    net = build_network(tiny_spec(), init_seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for _, p in net.named_parameters():
        if p.data.ndim == 1:  # BN affine and head bias: move off their defaults
            p.data += rng.normal(scale=0.3, size=p.shape)
    x = rng.normal(size=(6, 3, 6, 6))
    y = rng.integers(0, 3, size=6)
    return net, x, y


def network_weight_check(seed=0, max_coords=12):
    """Weight gradients of the gated net with sampled binary gates held fixed."""
    net, x, y = _tiny_problem(seed)
    rng = np.random.default_rng(seed + 1)
    net.set_connectivity("learned")
    for _, gs in net.gate_states():
        gs.sample(rng)
    params = [p for _, p in net.named_parameters()]

    def loss():
        return T.softmax_cross_entropy(net.forward(Tensor(x), True, "binary", GateTrace()), y)

    errs = check_tensors(loss, params, EPS, max_coords, np.random.default_rng(seed + 2), SCALE_FLOOR)
    return CheckResult("network weights (sampled binary gates)", max(errs.values()))


def network_gate_check(seed=0):
    """Straight-through gate gradients: binary forward, gates treated as continuous multipliers."""
    net, x, y = _tiny_problem(seed)
    rng = np.random.default_rng(seed + 3)
    net.set_connectivity("learned")
    for _, gs in net.gate_states():
        gs.sample(rng)
        gs.binary_gates = gs.binary_gates.astype(np.float64)

    trace = GateTrace()
    with Tape() as tape:
        loss = T.softmax_cross_entropy(net.forward(Tensor(x), True, "binary", trace), y)
    tape.backward(loss)
    analytic = trace.gate_gradients(net.modules)

    worst = 0.0
    for (i, j), gs in net.gate_states():
        holder = Tensor(gs.binary_gates)
        gs.binary_gates = holder.data

        def f():
            return T.softmax_cross_entropy(net.forward(Tensor(x), True, "binary", GateTrace()), y)

        fd = numerical_gradient(f, holder, EPS)
        worst = max(worst, max_relative_error(analytic[(i, j)], fd, scale_floor=SCALE_FLOOR))
    return CheckResult("gate gradients (straight-through, binary forward)", worst)


def network_relaxed_check(seed=0, gates=(0.5, 0.5)):
    """Gradients through the normalized real gates of the continuous relaxation."""
    net, x, y = _tiny_problem(seed)
    net.set_connectivity("real_valued")
    for _, gs in net.gate_states():
        gs.real_gates = np.array(gates, dtype=np.float64)
    trace = GateTrace()
    with Tape() as tape:
        loss = T.softmax_cross_entropy(net.forward(Tensor(x), True, "real", trace), y)
    tape.backward(loss)

    worst = 0.0
    for (i, j), gs in net.gate_states():
        holder = Tensor(gs.real_gates)
        gs.real_gates = holder.data

        def f():
            return T.softmax_cross_entropy(net.forward(Tensor(x), True, "real"), y)

        fd = numerical_gradient(f, holder, EPS)
        worst = max(worst, max_relative_error(trace.real[(i, j)].grad, fd, scale_floor=SCALE_FLOOR))
    params = [p for _, p in net.named_parameters()]

    def loss_fn():
        return T.softmax_cross_entropy(net.forward(Tensor(x), True, "real"), y)

    errs = check_tensors(loss_fn, params, EPS, 8, np.random.default_rng(seed + 4), SCALE_FLOOR)
    return CheckResult(f"real-valued gates g={list(gates)} (gates and weights)", max(worst, *errs.values()))


def run_suite(seed=0):
    results = primitive_checks(seed)
    results.append(network_weight_check(seed))
    results.append(network_gate_check(seed))
    results.append(network_relaxed_check(seed))
    results.append(network_relaxed_check(seed, (0.3, 0.9)))
    return results
