"""Learnable branch connectivity: real-valued gates and their binary samples.

Each residual block ``j`` of module ``i > 1`` owns a :class:`GateState` over
the ``C`` branches of module ``i - 1``. During training the real gates are
normalized into a multinomial distribution, ``K`` distinct branches are drawn
to form the binary gate, the network runs forward/backward with the binary
gate, and the gradient w.r.t. the binary gate updates the real gate
(straight-through), followed by clipping to ``[0, 1]``.
"""
from dataclasses import dataclass, field

import numpy as np

from .errors import GateError, ShapeError
from .tensor import Tensor, add_n, scale

NORMALIZE_TINY = 1e-8


def normalize_gates(real_gates):
    """Probability vector proportional to ``real_gates``; uniform if their sum is below 1e-8."""
    g = np.asarray(real_gates, dtype=np.float64)
    if np.any(g < 0) or np.any(g > 1):
        raise GateError("real gates must lie in [0, 1]")
    total = g.sum()
    if total < NORMALIZE_TINY:
        return np.full(g.size, 1.0 / g.size)
    return g / total


def _check_fan_in(k, c):
    if not 1 <= k <= c:
        raise GateError(f"fan-in K={k} must satisfy 1 <= K <= C={c}")


def sample_binary_gates_batch(probs, k, rng, n):
    """``n`` independent binary gates, each with exactly ``k`` ones.

    Every row is built by ``k`` sequential draws without replacement: an
    index is drawn with probability proportional to the remaining mass.
    Zero-probability indices are reachable only once the positive mass is
    exhausted, after which the draw is uniform over what remains.
    """
    p = np.asarray(probs, dtype=np.float64)
    c = p.size
    _check_fan_in(k, c)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise GateError("probabilities must be non-negative and sum to 1")
    out = np.zeros((n, c), dtype=np.int8)
    rows = np.arange(n)
    positive = np.broadcast_to(p > 0, (n, c))
    for _ in range(k):
        avail = out == 0
        mass = np.where(avail, p, 0.0)
        total = mass.sum(axis=1)
        u = rng.random(n)
        cum = np.cumsum(mass, axis=1)
        hit = (cum > (u * total)[:, None]) & (mass > 0)
        has_hit = hit.any(axis=1)
        # rounding can leave u*total >= cum[-1]; take the last positive entry then
        last_pos = c - 1 - np.argmax((mass > 0)[:, ::-1], axis=1)
        idx = np.where(has_hit, hit.argmax(axis=1), last_pos)
        empty = ~(avail & positive).any(axis=1)
        if empty.any():
            av = avail[empty]
            rank = np.floor(u[empty] * av.sum(axis=1)).astype(np.int64)
            order = np.cumsum(av, axis=1) - 1
            idx[empty] = ((order == rank[:, None]) & av).argmax(axis=1)
        out[rows, idx] = 1
    return out


def sample_binary_gates(probs, k, rng):
    """One binary gate with exactly ``k`` ones; see :func:`sample_binary_gates_batch`."""
    return sample_binary_gates_batch(probs, k, rng, 1)[0]


def gated_input(binary_gates, branch_outputs):
    """Gate-weighted sum of branch outputs; branches with a zero gate are skipped.

    Unit gates add their branch unscaled, so ``[1, 0, 0]`` returns exactly
    the first branch.
    """
    outs = list(branch_outputs)
    g = np.asarray(binary_gates, dtype=np.float64)
    if g.size != len(outs):
        raise ShapeError("gated_input gate count vs branches", len(outs), g.size)
    for y in outs[1:]:
        if y.shape != outs[0].shape:
            raise ShapeError("gated_input branch shape", outs[0].shape, y.shape)
    terms = []
    for gk, y in zip(g, outs):
        if gk == 0:
            continue
        terms.append(y if gk == 1 else scale(y, gk))
    if not terms:
        return Tensor(np.zeros_like(outs[0].data))
    return add_n(terms)


def gated_backward(upstream_grads, gates):
    """Gradient w.r.t. each source branch: ``dL/dy_k = sum_j g[j][k] * dL/dx_j``."""
    g = np.asarray(gates, dtype=np.float64)
    ups = [np.asarray(u) for u in upstream_grads]
    if g.shape[0] != len(ups):
        raise ShapeError("gated_backward receivers", len(ups), g.shape[0])
    out = []
    for k in range(g.shape[1]):
        acc = np.zeros_like(ups[0])
        for j, u in enumerate(ups):
            if g[j, k] != 0:
                acc = acc + (u if g[j, k] == 1 else g[j, k] * u)
        out.append(acc)
    return out


def gate_gradient(upstream_grad, branch_output):
    """Inner product of ``dL/dx_j`` with ``y_k``: the derivative of the loss w.r.t. ``g_jk``."""
    a = np.asarray(upstream_grad.data if isinstance(upstream_grad, Tensor) else upstream_grad)
    b = np.asarray(branch_output.data if isinstance(branch_output, Tensor) else branch_output)
    if a.shape != b.shape:
        raise ShapeError("gate_gradient operand shape", a.shape, b.shape)
    return float(np.dot(a.reshape(-1).astype(np.float64), b.reshape(-1).astype(np.float64)))


def update_and_clip(real_gates, grads, eta):
    """One gradient-descent step on the real gates, clipped to ``[0, 1]``."""
    if not eta > 0:
        raise GateError(f"gate learning rate must be positive, got {eta}")
    g = np.asarray(real_gates)
    step = g - np.asarray(eta, dtype=g.dtype) * np.asarray(grads, dtype=g.dtype)
    return np.minimum(1, np.maximum(0, step)).astype(g.dtype)


def freeze_top_k(real_gates, k):
    """Binary vector with ones at the ``k`` largest entries; ties go to the lower index."""
    g = np.asarray(real_gates)
    _check_fan_in(k, g.size)
    order = np.argsort(-g, kind="stable")
    out = np.zeros(g.size, dtype=np.int8)
    out[order[:k]] = 1
    return out


def gate_entropy(real_gates):
    """Shannon entropy (nats) of the normalized real gates."""
    p = normalize_gates(real_gates)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class GateState:
    """Real and binary gates of one block.

    ``fixed`` marks the always-on pseudo gate of first-module blocks, which
    is never sampled, updated or counted in branching statistics.
    """

    real_gates: np.ndarray
    binary_gates: np.ndarray
    fan_in: int
    fixed: bool = False
    grad: np.ndarray = field(default=None, repr=False, compare=False)

    @classmethod
    def initial(cls, cardinality, fan_in, dtype=np.float32):
        _check_fan_in(fan_in, cardinality)
        real = np.full(cardinality, 1.0 / cardinality, dtype=dtype)
        return cls(real, freeze_top_k(real, fan_in), fan_in)

    @classmethod
    def pseudo(cls, dtype=np.float32):
        return cls(np.ones(1, dtype=dtype), np.ones(1, dtype=np.int8), 1, fixed=True)

    @property
    def cardinality(self):
        return self.real_gates.size

    def probabilities(self):
        return normalize_gates(self.real_gates)

    def sample(self, rng):
        self.binary_gates = sample_binary_gates(self.probabilities(), self.fan_in, rng)
        return self.binary_gates

    def freeze(self):
        self.binary_gates = freeze_top_k(self.real_gates, self.fan_in)
        return self.binary_gates

    def update(self, grads, eta):
        self.real_gates = update_and_clip(self.real_gates, grads, eta)

    def entropy(self):
        return gate_entropy(self.real_gates)
