"""Architecture specs and multi-branch residual networks.

A network is a 3x3 stem convolution, ``M`` multi-branch modules of ``C``
bottleneck residual blocks each, and an average-pool + fully-connected head,
so its depth in learnable layers is ``D = 2 + 3M``.

Wiring between modules
----------------------
Every block ``k`` produces a residual ``r_k`` (the conv/BN stack) and a
shortcut ``s_k`` (its input, or the module's shared 1x1 projection of it when
the shape changes). Block ``j`` of the next module receives

    x_j = sum_k g_jk * (r_k + s_k / K)

followed by a ReLU, where ``g_j`` is its binary gate and ``K`` its number of
active entries (the fan-in while gates are learned, ``C`` for full
connectivity). Residuals are summed over the selected branches and shortcuts are
averaged, so with all gates on (``K = C``) and a shared input this is exactly
``relu(x + sum_j F(x; theta_j))``, the ResNeXt module. The classifier sees the
same aggregation over all ``C`` branches of the last module.
"""
import json
from collections import namedtuple
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import rng as rngmod
from .errors import ConfigError, GateError, ShapeError
from .gates import GateState
from .tensor import (
    BatchNormState,
    Tensor,
    add,
    add_n,
    batch_norm,
    classifier_head,
    conv2d,
    max_pool2d,
    normalize,
    relu,
    scale,
    weighted_sum,
)

ModuleLayout = namedtuple("ModuleLayout", "in_channels bottleneck out_channels stride")


@dataclass(frozen=True)
class StageSpec:
    num_modules: int
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    stride: int = 1


@dataclass(frozen=True)
class ArchSpec:
    depth: int
    bottleneck_width: int
    cardinality: int
    fan_in: int
    num_classes: int
    stages: tuple
    stem_channels: int
    input_shape: tuple = (3, 32, 32)
    stem_pool: bool = False
    name: str = None

    @property
    def num_modules(self):
        return sum(s.num_modules for s in self.stages)

    def validate(self):
        for key in ("depth", "bottleneck_width", "cardinality", "num_classes", "stem_channels"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be a positive integer")
        if not self.stages:
            raise ConfigError("at least one stage is required")
        m = self.num_modules
        if self.depth != 2 + 3 * m:
            raise ConfigError(
                f"depth must equal 2+3M: got D={self.depth} but the stages hold M={m} modules (2+3M={2 + 3 * m})"
            )
        if not 1 <= self.fan_in <= self.cardinality:
            raise ConfigError(f"fan-in K={self.fan_in} must satisfy 1 <= K <= C={self.cardinality}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError("input_shape must be (channels, height, width)")
        prev_out = self.stem_channels
        for s, stage in enumerate(self.stages):
            if min(stage.num_modules, stage.in_channels, stage.bottleneck_channels, stage.out_channels) < 1:
                raise ConfigError(f"stage {s}: all sizes must be positive")
            if stage.stride not in (1, 2):
                raise ConfigError(f"stage {s}: stride must be 1 or 2")
            if stage.in_channels != prev_out:
                raise ConfigError(
                    f"stage {s}: in_channels {stage.in_channels} does not match previous output {prev_out}"
                )
            prev_out = stage.out_channels
        return self

    def module_layout(self):
        layout = []
        for stage in self.stages:
            for m in range(stage.num_modules):
                first = m == 0
                layout.append(
                    ModuleLayout(
                        stage.in_channels if first else stage.out_channels,
                        stage.bottleneck_channels,
                        stage.out_channels,
                        stage.stride if first else 1,
                    )
                )
        return layout

    def with_fan_in(self, fan_in):
        return replace(self, fan_in=int(fan_in)).validate()

    def to_dict(self):
        d = asdict(self)
        d["stages"] = [
            {
                "num_modules": s.num_modules,
                "in_channels": s.in_channels,
                "bottleneck_channels": s.bottleneck_channels,
                "out_channels": s.out_channels,
                "stride": s.stride,
            }
            for s in self.stages
        ]
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        required = ("depth", "bottleneck_width", "cardinality", "fan_in", "num_classes", "stages", "stem_channels")
        missing = [k for k in required if k not in d]
        if missing:
            raise ConfigError(f"architecture config is missing keys: {', '.join(missing)}")
        try:
            stages = tuple(
                StageSpec(
                    int(s["num_modules"]),
                    int(s["in_channels"]),
                    int(s["bottleneck_channels"]),
                    int(s["out_channels"]),
                    int(s.get("stride", 1)),
                )
                for s in d["stages"]
            )
            spec = cls(
                depth=int(d["depth"]),
                bottleneck_width=int(d["bottleneck_width"]),
                cardinality=int(d["cardinality"]),
                fan_in=int(d["fan_in"]),
                num_classes=int(d["num_classes"]),
                stages=stages,
                stem_channels=int(d["stem_channels"]),
                input_shape=tuple(int(v) for v in d.get("input_shape", (3, 32, 32))),
                stem_pool=bool(d.get("stem_pool", False)),
                name=d.get("name"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed architecture config: {exc}") from exc
        return spec.validate()


def _three_stage(name, depth, widths, outs, stem, cardinality, fan_in, num_classes, input_shape, stem_pool=False):
    m = (depth - 2) // 3
    per_stage = m // 3
    ins = (stem, outs[0], outs[1])
    stages = tuple(
        StageSpec(per_stage, ins[s], widths[s], outs[s], 1 if s == 0 else 2) for s in range(3)
    )
    return ArchSpec(depth, widths[0], cardinality, fan_in, num_classes, stages, stem, input_shape, stem_pool, name)


def _imagenet(name, depth, width, cardinality, fan_in):
    counts = {50: (3, 4, 6, 3), 101: (3, 4, 23, 3)}[depth]
    outs = (256, 512, 1024, 2048)
    ins = (64,) + outs[:3]
    stages = tuple(
        StageSpec(counts[s], ins[s], width * 2**s, outs[s], 1 if s == 0 else 2) for s in range(4)
    )
    return ArchSpec(depth, width, cardinality, fan_in, 1000, stages, 64, (3, 224, 224), True, name)


def _presets():
    small = ((4, 8, 16), (64, 128, 256))
    p = {
        "cifar-{20,4,8}": _three_stage("cifar-{20,4,8}", 20, *small, 16, 8, 4, 100, (3, 32, 32)),
        "cifar-{29,4,8}": _three_stage("cifar-{29,4,8}", 29, *small, 16, 8, 4, 100, (3, 32, 32)),
        "cifar-{29,8,8}": _three_stage("cifar-{29,8,8}", 29, (8, 16, 32), (64, 128, 256), 16, 8, 4, 100, (3, 32, 32)),
        "cifar-{29,64,8}": _three_stage(
            "cifar-{29,64,8}", 29, (64, 128, 256), (256, 512, 1024), 64, 8, 4, 100, (3, 32, 32)
        ),
        "mini-{20,4,8}": _three_stage("mini-{20,4,8}", 20, *small, 16, 8, 4, 100, (3, 64, 64), True),
        "mini-{29,8,8}": _three_stage("mini-{29,8,8}", 29, (8, 16, 32), (64, 128, 256), 16, 8, 4, 100, (3, 64, 64), True),
        "imagenet-{50,4,32}": _imagenet("imagenet-{50,4,32}", 50, 4, 32, 16),
        "imagenet-{101,4,32}": _imagenet("imagenet-{101,4,32}", 101, 4, 32, 16),
        "imagenet-{101,4,64}": _imagenet("imagenet-{101,4,64}", 101, 4, 64, 32),
        # desk-scale network used by the synthetic benchmarks
        "toy-{11,2,4}": ArchSpec(
            11, 2, 4, 2, 4,
            (StageSpec(1, 8, 2, 16, 1), StageSpec(1, 16, 4, 32, 2), StageSpec(1, 32, 8, 64, 2)),
            8, (3, 16, 16), False, "toy-{11,2,4}",
        ),
    }
    for spec in p.values():
        spec.validate()
    return p


PRESETS = _presets()


def parse_arch_spec(config_text):
    """Build an :class:`ArchSpec` from a preset name or a JSON config string."""
    text = config_text.strip()
    if text in PRESETS:
        return PRESETS[text]
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"unknown preset and invalid JSON architecture config: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("architecture config must be a JSON object")
    return ArchSpec.from_dict(d)


def load_arch(name_or_path):
    """Resolve a preset name or a path to a JSON architecture file."""
    if name_or_path in PRESETS:
        return PRESETS[name_or_path]
    try:
        with open(name_or_path, encoding="utf-8") as fh:
            return parse_arch_spec(fh.read())
    except FileNotFoundError:
        raise ConfigError(
            f"{name_or_path!r} is neither a preset ({', '.join(sorted(PRESETS))}) nor a readable file"
        ) from None


# ---------------------------------------------------------------------------
# parameter containers


def _he_normal(rng, shape, dtype):
    fan_in = int(np.prod(shape[1:]))
    return Tensor(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(dtype), requires_grad=True)


class Block:
    """Bottleneck residual function: 1x1 reduce, 3x3 (carries the stride), 1x1 restore."""

    def __init__(self, in_channels, bottleneck, out_channels, stride, rng, dtype):
        self.stride = stride
        self.conv1 = _he_normal(rng, (bottleneck, in_channels, 1, 1), dtype)
        self.bn1 = BatchNormState(bottleneck, dtype=dtype)
        self.conv2 = _he_normal(rng, (bottleneck, bottleneck, 3, 3), dtype)
        self.bn2 = BatchNormState(bottleneck, dtype=dtype)
        self.conv3 = _he_normal(rng, (out_channels, bottleneck, 1, 1), dtype)
        self.bn3 = BatchNormState(out_channels, dtype=dtype)

    @property
    def in_channels(self):
        return self.conv1.shape[1]

    def residual(self, x, training):
        if x.shape[1] != self.in_channels:
            raise ShapeError("block input channels", self.in_channels, x.shape[1])
        h = relu(batch_norm(conv2d(x, self.conv1), self.bn1, training))
        h = relu(batch_norm(conv2d(h, self.conv2, self.stride, 1), self.bn2, training))
        return batch_norm(conv2d(h, self.conv3), self.bn3, training)

    def named_parameters(self, prefix):
        for k in ("1", "2", "3"):
            conv, bn = getattr(self, "conv" + k), getattr(self, "bn" + k)
            yield f"{prefix}.conv{k}", conv
            yield f"{prefix}.bn{k}.gamma", bn.gamma
            yield f"{prefix}.bn{k}.beta", bn.beta

    def named_buffers(self, prefix):
        for k in ("1", "2", "3"):
            bn = getattr(self, "bn" + k)
            yield f"{prefix}.bn{k}.running_mean", bn.running_mean
            yield f"{prefix}.bn{k}.running_var", bn.running_var


class Projection:
    """Strided 1x1 convolution + BN on the shortcut, shared by all blocks of a module."""

    def __init__(self, in_channels, out_channels, stride, rng, dtype):
        self.stride = stride
        self.conv = _he_normal(rng, (out_channels, in_channels, 1, 1), dtype)
        self.bn = BatchNormState(out_channels, dtype=dtype)

    def __call__(self, x, training):
        return batch_norm(conv2d(x, self.conv, self.stride, 0), self.bn, training)

    def named_parameters(self, prefix):
        yield f"{prefix}.conv", self.conv
        yield f"{prefix}.bn.gamma", self.bn.gamma
        yield f"{prefix}.bn.beta", self.bn.beta

    def named_buffers(self, prefix):
        yield f"{prefix}.bn.running_mean", self.bn.running_mean
        yield f"{prefix}.bn.running_var", self.bn.running_var


class GatedModule:
    """``C`` parallel residual blocks plus their gates over the previous module.

    ``blocks`` and ``gates`` are dicts keyed by block index so that pruned
    blocks can be dropped without renumbering the survivors.
    """

    def __init__(self, index, layout, cardinality, fan_in, rng, dtype):
        self.index = index
        self.layout = layout
        self.cardinality = cardinality
        in_ch, width, out_ch, stride = layout
        self.blocks = {j: Block(in_ch, width, out_ch, stride, rng, dtype) for j in range(cardinality)}
        needs_proj = in_ch != out_ch or stride != 1
        self.projection = Projection(in_ch, out_ch, stride, rng, dtype) if needs_proj else None
        if index == 0:
            self.gates = {j: GateState.pseudo(dtype) for j in range(cardinality)}
        else:
            self.gates = {j: GateState.initial(cardinality, fan_in, dtype) for j in range(cardinality)}

    def shortcut(self, x, training):
        return self.projection(x, training) if self.projection is not None else x

    def forward_branches(self, inputs, training):
        """Map ``{j: input}`` to ``{j: (residual, shortcut)}``.

        Blocks that share an input tensor share one shortcut computation.
        """
        order = sorted(inputs)
        residuals = {j: self.blocks[j].residual(inputs[j], training) for j in order}
        shortcuts = {}
        out = {}
        for j in order:
            key = id(inputs[j])
            if key not in shortcuts:
                shortcuts[key] = self.shortcut(inputs[j], training)
            out[j] = (residuals[j], shortcuts[key])
        return out

    def gate_matrix(self):
        c = self.cardinality
        g = np.zeros((c, c if self.index else 1), dtype=np.int8)
        for j, gs in self.gates.items():
            g[j] = gs.binary_gates
        return g


def aggregate(sources, weights, mass):
    """``sum_k w_k * (r_k + s_k / mass)`` over ``sources = {k: (r_k, s_k)}``.

    Shortcut tensors shared by several sources are combined once with their
    total weight, so a unit total weight returns the shortcut unscaled.
    """
    ks = [k for k in sorted(sources) if weights.get(k, 0) != 0]
    residual = add_n([sources[k][0] if weights[k] == 1 else scale(sources[k][0], weights[k]) for k in ks])
    groups = {}
    for k in ks:
        s = sources[k][1]
        entry = groups.setdefault(id(s), [s, 0.0])
        entry[1] += weights[k]
    terms = []
    for s, w in groups.values():
        coef = w / mass
        terms.append(s if coef == 1.0 else scale(s, coef))
    return add(residual, terms[0] if len(terms) == 1 else add_n(terms))


class GateTrace:
    """Tensors retained during a training forward pass for the gate update."""

    def __init__(self):
        self.inputs = {}
        self.sources = {}
        self.real = {}

    def gate_gradients(self, modules):
        """``{(i, j): dL/dg_ij}`` from the binary-gate forward (straight-through)."""
        from .gates import gate_gradient

        out = {}
        for (i, j), (x, mass) in self.inputs.items():
            c = modules[i].cardinality
            grad = np.zeros(c)
            if x.grad is not None:
                prev = self.sources[i - 1]
                for k in range(c):
                    if k in prev:
                        r, s = prev[k]
                        grad[k] = gate_gradient(x.grad, r.data + s.data / s.data.dtype.type(mass))
            out[(i, j)] = grad
        return out


def gate_mass(g):
    """Number of switched-on gates (entries >= 1/2); the shortcut divisor of a block input."""
    return int(np.count_nonzero(np.asarray(g) >= 0.5))


CONNECTIVITY_TAGS = ("init", "learned", "frozen", "full", "fixed_random", "real_valued")


class Network:
    """Stem, gated multi-branch modules and classifier head built from an :class:`ArchSpec`."""

    def __init__(self, spec, init_seed=0, dtype=np.float32):
        spec.validate()
        self.spec = spec
        self.dtype = np.dtype(dtype)
        rng = rngmod.stream(init_seed, "init")
        cin = spec.input_shape[0]
        self.stem_conv = _he_normal(rng, (spec.stem_channels, cin, 3, 3), self.dtype)
        self.stem_bn = BatchNormState(spec.stem_channels, dtype=self.dtype)
        self.modules = [
            GatedModule(i, lay, spec.cardinality, spec.fan_in, rng, self.dtype)
            for i, lay in enumerate(spec.module_layout())
        ]
        last = spec.stages[-1].out_channels
        self.head_w = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / last), size=(spec.num_classes, last)).astype(self.dtype),
            requires_grad=True,
        )
        self.head_b = Tensor(np.zeros(spec.num_classes, dtype=self.dtype), requires_grad=True)
        self.connectivity = "init"

    # -- bookkeeping -------------------------------------------------------

    @property
    def frozen(self):
        return self.connectivity in ("frozen", "full", "fixed_random")

    def named_parameters(self):
        yield "stem.conv", self.stem_conv
        yield "stem.bn.gamma", self.stem_bn.gamma
        yield "stem.bn.beta", self.stem_bn.beta
        for i, mod in enumerate(self.modules):
            if mod.projection is not None:
                yield from mod.projection.named_parameters(f"m{i}.proj")
            for j in sorted(mod.blocks):
                yield from mod.blocks[j].named_parameters(f"m{i}.b{j}")
        yield "head.weight", self.head_w
        yield "head.bias", self.head_b

    def named_buffers(self):
        yield "stem.bn.running_mean", self.stem_bn.running_mean
        yield "stem.bn.running_var", self.stem_bn.running_var
        for i, mod in enumerate(self.modules):
            if mod.projection is not None:
                yield from mod.projection.named_buffers(f"m{i}.proj")
            for j in sorted(mod.blocks):
                yield from mod.blocks[j].named_buffers(f"m{i}.b{j}")

    def gate_states(self, include_fixed=False):
        """Iterate ``((i, j), GateState)`` over present blocks."""
        for i, mod in enumerate(self.modules):
            for j in sorted(mod.blocks):
                gs = mod.gates[j]
                if include_fixed or not gs.fixed:
                    yield (i, j), gs

    def set_connectivity(self, tag):
        if tag not in CONNECTIVITY_TAGS:
            raise GateError(f"unknown connectivity {tag!r}")
        self.connectivity = tag

    def freeze_gates(self):
        for _, gs in self.gate_states():
            gs.freeze()
        self.connectivity = "frozen"

    def set_full_gates(self):
        for _, gs in self.gate_states():
            gs.binary_gates = np.ones(gs.cardinality, dtype=np.int8)
        self.connectivity = "full"

    def reachable_blocks(self):
        """Blocks reachable from the stem through active gates, per module."""
        reach = []
        for i, mod in enumerate(self.modules):
            if i == 0:
                reach.append(set(mod.blocks))
                continue
            prev = reach[-1]
            reach.append(
                {j for j in mod.blocks if any(mod.gates[j].binary_gates[k] and k in prev for k in range(mod.cardinality))}
            )
        return reach

    def alive_blocks(self):
        """Set of ``(i, j)`` on some stem-to-head path under the binary gates."""
        reach = self.reachable_blocks()
        live = [set() for _ in self.modules]
        live[-1] = set(reach[-1])
        for i in range(len(self.modules) - 2, -1, -1):
            nxt = self.modules[i + 1]
            live[i] = {
                k for k in reach[i] if any(nxt.gates[j].binary_gates[k] for j in live[i + 1])
            }
        return {(i, j) for i, js in enumerate(live) for j in js}

    # -- forward -----------------------------------------------------------

    def stem(self, x, training):
        h = relu(batch_norm(conv2d(x, self.stem_conv, 1, 1), self.stem_bn, training))
        if self.spec.stem_pool:
            h = max_pool2d(h, 3, 2, 1)
        return h

    def forward(self, x, training=False, connectivity="binary", trace=None):
        """Logits for an N,C,H,W batch.

        ``connectivity="binary"`` uses each block's binary gates;
        ``"real"`` mixes branches with the normalized real gates (continuous,
        differentiable w.r.t. the real gates). Passing a :class:`GateTrace`
        computes every reachable block (needed for gate gradients); otherwise
        only blocks on a stem-to-head path are evaluated.
        """
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError("network input shape", tuple(self.spec.input_shape), tuple(x.shape[1:]))
        if connectivity not in ("binary", "real"):
            raise GateError(f"unknown connectivity {connectivity!r}")
        needed = None if (trace is not None or connectivity == "real") else self.alive_blocks()
        h = self.stem(x, training)
        prev = None
        for i, mod in enumerate(self.modules):
            if i == 0:
                inputs = {j: h for j in mod.blocks if needed is None or (0, j) in needed}
            elif connectivity == "real":
                inputs = self._mix_real(mod, i, prev, trace)
            else:
                inputs = self._mix_binary(mod, i, prev, trace, needed)
            prev = mod.forward_branches(inputs, training)
            if trace is not None:
                trace.sources[i] = prev
        if not prev:
            raise GateError("no block of the last module is connected to the stem")
        z = relu(aggregate(prev, {k: 1 for k in prev}, self.spec.cardinality))
        return classifier_head(z, self.head_w, self.head_b)

    __call__ = forward

    def _mix_binary(self, mod, i, prev, trace, needed):
        inputs = {}
        shared = {}
        for j in sorted(mod.blocks):
            if needed is not None and (i, j) not in needed:
                continue
            gs = mod.gates[j]
            g = gs.binary_gates
            weights = {k: g[k].item() for k in range(mod.cardinality) if g[k] != 0 and k in prev}
            if not weights:
                continue
            key = tuple(sorted(weights.items()))
            if trace is None and key in shared:
                inputs[j] = shared[key]
                continue
            mass = gate_mass(g)
            x = aggregate(prev, weights, mass)
            if trace is not None:
                trace.inputs[(i, j)] = (x, mass)
            inputs[j] = shared[key] = relu(x)
        return inputs

    def _mix_real(self, mod, i, prev, trace):
        if len(prev) != mod.cardinality:
            raise GateError("real-valued gates need every branch of the previous module")
        ys = [add(prev[k][0], prev[k][1]) for k in range(mod.cardinality)]
        inputs = {}
        for j in sorted(mod.blocks):
            gt = Tensor(mod.gates[j].real_gates, requires_grad=True)
            if trace is not None:
                trace.real[(i, j)] = gt
            inputs[j] = relu(weighted_sum(normalize(gt), ys))
        return inputs

    def predict(self, images, batch_size=256):
        out = []
        for s in range(0, len(images), batch_size):
            out.append(self.forward(Tensor(images[s:s + batch_size].astype(self.dtype)), training=False).data)
        return np.concatenate(out, axis=0)


def build_network(spec, init_seed=0, dtype=np.float32):
    """Instantiate a network; identical seeds give bit-identical parameters."""
    return Network(spec, init_seed, dtype)


# ---------------------------------------------------------------------------
# plain multi-branch reference path (all branches share one input)


def resnext_module_forward(x, module, training):
    """``relu(shortcut(x) + sum_j F(x; theta_j))`` for one multi-branch module."""
    if x.shape[1] != module.layout.in_channels:
        raise ShapeError("module input channels", module.layout.in_channels, x.shape[1])
    branches = [module.blocks[j].residual(x, training) for j in sorted(module.blocks)]
    return relu(add(add_n(branches), module.shortcut(x, training)))


def resnext_forward(net, x, training=False):
    """Logits of ``net`` treated as a plain ResNeXt (gates ignored)."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=net.dtype))
    y = net.stem(x, training)
    for mod in net.modules:
        y = resnext_module_forward(y, mod, training)
    return classifier_head(y, net.head_w, net.head_b)


# ---------------------------------------------------------------------------
# parameter counting


def block_parameter_count(in_channels, bottleneck, out_channels):
    convs = in_channels * bottleneck + bottleneck * bottleneck * 9 + bottleneck * out_channels
    return convs + 2 * (bottleneck + bottleneck + out_channels)


def projection_parameter_count(layout):
    in_ch, _, out_ch, stride = layout
    if in_ch == out_ch and stride == 1:
        return 0
    return in_ch * out_ch + 2 * out_ch


def spec_parameter_count(spec):
    """Per-layer formula for the full (unpruned) parameter count of ``spec``."""
    cin = spec.input_shape[0]
    total = cin * 9 * spec.stem_channels + 2 * spec.stem_channels
    for lay in spec.module_layout():
        total += spec.cardinality * block_parameter_count(lay.in_channels, lay.bottleneck, lay.out_channels)
        total += projection_parameter_count(lay)
    last = spec.stages[-1].out_channels
    return total + last * spec.num_classes + spec.num_classes


def count_parameters(net, mode="train"):
    """Learnable parameters (convs, BN affine, classifier); gates and BN statistics excluded.

    ``mode="train"`` counts every block present in ``net``; ``mode="test"``
    counts only blocks on a stem-to-head path under the current binary gates.
    """
    if mode == "train":
        return int(sum(t.size for _, t in net.named_parameters()))
    if mode != "test":
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    alive = net.alive_blocks()
    total = net.stem_conv.size + net.stem_bn.gamma.size + net.stem_bn.beta.size
    for i, mod in enumerate(net.modules):
        live = [j for j in mod.blocks if (i, j) in alive]
        for j in live:
            total += sum(t.size for _, t in mod.blocks[j].named_parameters(""))
        if live and mod.projection is not None:
            total += sum(t.size for _, t in mod.projection.named_parameters(""))
    return int(total + net.head_w.size + net.head_b.size)
