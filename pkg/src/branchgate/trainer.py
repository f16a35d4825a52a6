"""Joint training of weights and branch gates, phase schedules and baselines.

One learned-connectivity step: sample ``K`` active gates per block from the
normalized real gates, run forward/backward with those binary gates, update
the real gates with the binary-gate gradient and clip to ``[0, 1]``, then take
an SGD-with-momentum step on the weights. A schedule chains such phases with
fine-tuning phases that freeze each block's top-``K`` gates.
"""
import contextlib
import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng as rngmod
from .arch import GateTrace
from .data import iterate_batches
from .errors import ConfigError, DivergenceError, GateError
from .tensor import Tape, Tensor, softmax_cross_entropy

MODES = ("learned", "frozen_topk", "full", "fixed_random", "real_valued")


@dataclass
class Phase:
    epochs: int
    weight_lr: float
    gate_lr: float = 0.0
    mode: str = "learned"

    def to_dict(self):
        return {"epochs": self.epochs, "weight_lr": self.weight_lr, "gate_lr": self.gate_lr, "mode": self.mode}


@dataclass
class TrainSchedule:
    phases: list

    def validate(self):
        seen_gates = False
        for n, p in enumerate(self.phases):
            if p.mode not in MODES:
                raise ConfigError(f"phase {n}: unknown mode {p.mode!r} (expected one of {', '.join(MODES)})")
            if p.epochs < 0 or p.weight_lr < 0 or p.gate_lr < 0:
                raise ConfigError(f"phase {n}: epochs and learning rates must be non-negative")
            if p.mode == "frozen_topk" and not seen_gates:
                raise ConfigError(f"phase {n}: frozen_topk must follow a learned or real_valued phase")
            seen_gates = seen_gates or p.mode in ("learned", "real_valued")
        return self

    @property
    def total_epochs(self):
        return sum(p.epochs for p in self.phases)

    def scaled(self, factor):
        """Multiply every phase's epochs by ``factor`` (floor, at least 1 for non-empty phases)."""
        if factor <= 0:
            raise ConfigError("epoch scale must be positive")
        phases = [
            Phase(max(1, math.floor(p.epochs * factor)) if p.epochs else 0, p.weight_lr, p.gate_lr, p.mode)
            for p in self.phases
        ]
        return TrainSchedule(phases).validate()

    def to_json(self):
        return json.dumps([p.to_dict() for p in self.phases])

    @classmethod
    def from_json(cls, text):
        try:
            items = json.loads(text)
            phases = [
                Phase(int(d["epochs"]), float(d["weight_lr"]), float(d.get("gate_lr", 0.0)), d.get("mode", "learned"))
                for d in items
            ]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed schedule: {exc}") from exc
        return cls(phases).validate()

    @classmethod
    def reference(cls, dataset="cifar", baseline="learned"):
        """Four-phase schedules: ``dataset`` in {cifar, imagenet}; ``baseline`` picks the connectivity."""
        if dataset == "cifar":
            epochs = (120, 100, 50, 50)
        elif dataset == "imagenet":
            epochs = (30, 30, 30, 30)
        else:
            raise ConfigError(f"no reference schedule for {dataset!r}")
        lrs = (0.1, 0.1, 0.01, 0.001)
        if baseline in ("learned", "real_valued"):
            modes = (baseline, "frozen_topk", "frozen_topk", "frozen_topk")
            gate_lrs = (0.2, 0.0, 0.0, 0.0)
        elif baseline in ("full", "fixed_random"):
            modes = (baseline,) * 4
            gate_lrs = (0.0,) * 4
        else:
            raise ConfigError(f"unknown baseline {baseline!r}")
        return cls([Phase(e, lr, g, m) for e, lr, g, m in zip(epochs, lrs, gate_lrs, modes)]).validate()


def load_schedule(name_or_path):
    """``reference``/``reference-imagenet``/``reference-<baseline>`` presets, or a JSON file."""
    if name_or_path.startswith("reference"):
        parts = name_or_path.split("-")
        dataset = "imagenet" if "imagenet" in parts else "cifar"
        rest = [p for p in parts[1:] if p != "imagenet"]
        baseline = "_".join(rest) if rest else "learned"
        return TrainSchedule.reference(dataset, baseline)
    try:
        with open(name_or_path, encoding="utf-8") as fh:
            return TrainSchedule.from_json(fh.read())
    except FileNotFoundError:
        raise ConfigError(f"schedule {name_or_path!r} is neither a preset nor a readable file") from None


@dataclass
class OptimizerState:
    momentum: float = 0.9
    weight_decay: float = 5e-4
    buffers: dict = field(default_factory=dict)


def decays(name):
    """Weight decay applies to convolution kernels and the classifier weight only."""
    last = name.rsplit(".", 1)[-1]
    return last.startswith("conv") or name == "head.weight"


def sgd_update(param, grad, state, lr, name=None, weight_decay=True):
    """Momentum SGD in place: ``buf = m*buf + grad + wd*param``; ``param -= lr*buf``."""
    key = name if name is not None else id(param)
    data = param.data
    dt = data.dtype.type
    g = np.asarray(grad, dtype=data.dtype)
    if weight_decay and state.weight_decay:
        g = g + dt(state.weight_decay) * data
    buf = state.buffers.get(key)
    buf = g.copy() if buf is None else dt(state.momentum) * buf + g
    state.buffers[key] = buf
    data -= dt(lr) * buf
    return param


def make_fixed_random_gates(cardinality, fan_in, seed, num_blocks=1):
    """``num_blocks`` binary gates with ``fan_in`` uniformly chosen distinct active entries."""
    if not 1 <= fan_in <= cardinality:
        raise GateError(f"fan-in K={fan_in} must satisfy 1 <= K <= C={cardinality}")
    rng = rngmod.stream(seed, "fixed_random")
    out = np.zeros((num_blocks, cardinality), dtype=np.int8)
    for b in range(num_blocks):
        out[b, rng.choice(cardinality, size=fan_in, replace=False)] = 1
    return out


def apply_fixed_random_gates(net, seed):
    states = list(net.gate_states())
    gates = make_fixed_random_gates(net.spec.cardinality, net.spec.fan_in, seed, len(states))
    for row, (_, gs) in zip(gates, states):
        gs.binary_gates = row
    net.set_connectivity("fixed_random")


def _prepare_connectivity(net, mode):
    if mode == "learned":
        net.set_connectivity("learned")
    elif mode == "real_valued":
        net.set_connectivity("real_valued")
    elif mode == "full":
        if net.connectivity != "full":
            net.set_full_gates()
    elif mode == "frozen_topk":
        if net.connectivity != "frozen":
            net.freeze_gates()
    elif mode == "fixed_random":
        if net.connectivity != "fixed_random":
            raise GateError("fixed-random gates have not been drawn; call apply_fixed_random_gates first")
    else:
        raise ConfigError(f"unknown mode {mode!r}")


def _zero_grads(net):
    for _, p in net.named_parameters():
        p.grad = None


def _forward_loss(net, images, labels, connectivity, trace):
    with Tape() as tape:
        logits = net.forward(Tensor(np.asarray(images, dtype=net.dtype)), True, connectivity, trace)
        loss = softmax_cross_entropy(logits, labels)
    return tape, loss


def train_step(net, batch, phase, optimizer, rng, step=0):
    """One optimization step; returns the batch loss.

    Order: gate sampling (learned mode), forward with binary gates, backward,
    clipped gate update, momentum-SGD weight update.
    """
    images, labels = batch
    if len(labels) == 0:
        raise ValueError("empty batch")
    mode = phase.mode
    _prepare_connectivity(net, mode)
    trace = None
    connectivity = "binary"
    if mode == "learned":
        for _, gs in net.gate_states():
            gs.sample(rng)
        trace = GateTrace()
    elif mode == "real_valued":
        trace = GateTrace()
        connectivity = "real"
    _zero_grads(net)
    tape, loss = _forward_loss(net, images, labels, connectivity, trace)
    value = float(loss.data)
    if not math.isfinite(value):
        raise DivergenceError(step, value)
    tape.backward(loss)

    if phase.gate_lr > 0:
        if mode == "learned":
            for (i, j), g in trace.gate_gradients(net.modules).items():
                net.modules[i].gates[j].update(g, phase.gate_lr)
        elif mode == "real_valued":
            for (i, j), gt in trace.real.items():
                grad = gt.grad if gt.grad is not None else np.zeros_like(gt.data)
                net.modules[i].gates[j].update(grad, phase.gate_lr)

    for name, p in net.named_parameters():
        if p.grad is not None:
            sgd_update(p, p.grad, optimizer, phase.weight_lr, name, weight_decay=decays(name))
    _zero_grads(net)
    return value


def real_valued_forward(net, batch):
    """Loss with branches mixed by the normalized real gates; leaves gradients on the gate tensors.

    Returns ``(loss, {(i, j): gate tensor})``.
    """
    images, labels = batch
    trace = GateTrace()
    tape, loss = _forward_loss(net, images, labels, "real", trace)
    tape.backward(loss)
    return float(loss.data), trace.real


@contextlib.contextmanager
def eval_connectivity(net):
    """Temporarily replace sampled or soft gates by each block's top-K gates."""
    if net.connectivity in ("init", "learned", "real_valued"):
        saved = [(gs, gs.binary_gates) for _, gs in net.gate_states()]
        for gs, _ in saved:
            gs.freeze()
        try:
            yield net
        finally:
            for gs, g in saved:
                gs.binary_gates = g
    else:
        yield net


def evaluate(net, dataset, batch_size=256):
    """Top-1 accuracy on the mean-subtracted, unaugmented images."""
    images = dataset.normalized()
    with eval_connectivity(net):
        logits = net.predict(images, batch_size)
    return float((logits.argmax(axis=1) == dataset.labels).mean())


def mean_gate_entropy(net):
    ent = [gs.entropy() for _, gs in net.gate_states()]
    return float(np.mean(ent)) if ent else 0.0


@dataclass
class TrainingState:
    """Position within a schedule; with the seed this fixes every remaining random draw."""

    seed: int
    batch_size: int = 128
    augment: bool = True
    phase_index: int = 0
    epoch_in_phase: int = 0
    global_epoch: int = 0
    global_step: int = 0

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RunMetrics:
    records: list = field(default_factory=list)

    @property
    def losses(self):
        return [r["loss"] for r in self.records]

    @property
    def eval_accuracies(self):
        return [r["eval_acc"] for r in self.records]

    @property
    def gate_entropies(self):
        return [r["gate_entropy"] for r in self.records]

    def to_jsonl(self):
        return "".join(json.dumps(r) + "\n" for r in self.records)


def run_schedule(
    net,
    dataset,
    schedule,
    seed,
    eval_data=None,
    batch_size=128,
    augment=True,
    optimizer=None,
    state=None,
    max_epochs=None,
    on_epoch_end=None,
):
    """Run ``schedule`` on ``net`` (in place); returns ``(net, RunMetrics, TrainingState)``.

    Pass the ``state`` and ``optimizer`` from a checkpoint to resume; the
    continuation is bit-identical to an uninterrupted run. ``max_epochs``
    stops early after that many epochs of this call.
    """
    schedule.validate()
    optimizer = optimizer if optimizer is not None else OptimizerState()
    state = state if state is not None else TrainingState(seed, batch_size, augment)
    metrics = RunMetrics()
    ran = 0
    phases = schedule.phases
    while state.phase_index < len(phases):
        phase = phases[state.phase_index]
        if state.epoch_in_phase >= phase.epochs:
            state.phase_index += 1
            state.epoch_in_phase = 0
            continue
        if max_epochs is not None and ran >= max_epochs:
            break
        if state.epoch_in_phase == 0:
            if phase.mode == "fixed_random" and net.connectivity != "fixed_random":
                apply_fixed_random_gates(net, state.seed)
            _prepare_connectivity(net, phase.mode)
        started = time.perf_counter()
        losses = []
        batches = iterate_batches(dataset, state.batch_size, state.seed, state.global_epoch, state.augment)
        for batch in batches:
            rng = rngmod.stream(state.seed, "gates", state.global_step)
            try:
                losses.append(train_step(net, batch, phase, optimizer, rng, state.global_step))
            except DivergenceError as exc:
                raise DivergenceError(
                    exc.step, exc.loss, f"phase {state.phase_index}, epoch {state.global_epoch}"
                ) from None
            state.global_step += 1
        record = {
            "phase": state.phase_index,
            "epoch": state.global_epoch,
            "loss": float(np.mean(losses)),
            "eval_acc": evaluate(net, eval_data) if eval_data is not None else None,
            "gate_entropy": mean_gate_entropy(net),
            "seconds": time.perf_counter() - started,
        }
        metrics.records.append(record)
        state.epoch_in_phase += 1
        state.global_epoch += 1
        ran += 1
        if on_epoch_end is not None:
            on_epoch_end(net, state, optimizer, record)
    return net, metrics, state
