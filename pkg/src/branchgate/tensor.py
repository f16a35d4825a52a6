"""Dense N,C,H,W tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape` whenever
one of their inputs requires a gradient::

    with Tape() as tape:
        loss = softmax_cross_entropy(classifier_head(x, w, b), labels)
    grads = tape.backward(loss)
    grads[w]           # also available as w.grad

Without an active tape nothing is recorded, which is how inference runs.
"""
import threading

import numpy as np

from . import kernels
from .errors import LabelError, ShapeError, TapeError

CONV_METHOD = "im2col"

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A real-valued dense array plus autodiff bookkeeping.

    Integer input data is promoted to float64; float32/float64 arrays keep
    their dtype. ``data`` is always C-contiguous.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind in "biu":
            arr = arr.astype(np.float64)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def sum(self):
        return sum_all(self)


class Gradients:
    """Mapping from tensors to their accumulated gradients."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor):
        return self._grads[id(tensor)]

    def get(self, tensor, default=None):
        return self._grads.get(id(tensor), default)

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)


class Tape:
    """Ordered record of differentiable operations.

    Each record is ``(inputs, output, backward_fn)`` where ``backward_fn`` maps
    the output gradient to a tuple of input gradients (``None`` where an input
    needs none). Not safe to share between threads.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def record(self, inputs, output, backward_fn):
        self.records.append((tuple(inputs), output, backward_fn))

    def backward(self, loss, loss_grad=1.0):
        if not self.records:
            raise TapeError("backward called before any forward operation was recorded")
        if not any(out is loss for _, out, _ in self.records):
            raise TapeError("loss tensor was not produced on this tape")
        grads = {id(loss): np.full(loss.shape, loss_grad, dtype=loss.dtype)}
        tensors = {id(loss): loss}
        for inputs, out, fn in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            for t, gi in zip(inputs, fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = t
        for key, t in tensors.items():
            t.grad = grads[key]
        return Gradients(grads, tensors)


def backward(tape, loss, loss_grad=1.0):
    """Replay ``tape`` in reverse from ``loss``; see :meth:`Tape.backward`."""
    return tape.backward(loss, loss_grad)


def _result(data, inputs, backward_fn):
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward_fn)
    return out


def _as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype if like is not None else None))


def _same_shape(what, a, b):
    if a.shape != b.shape:
        raise ShapeError(what, a.shape, b.shape)


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a, b):
    b = _as_tensor(b, a)
    _same_shape("add operand shape", a, b)
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def add_n(tensors):
    """Left-to-right sum ``((t0 + t1) + t2) + ...`` recorded as one operation."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("add_n needs at least one tensor")
    acc = tensors[0].data.copy()
    for t in tensors[1:]:
        _same_shape("add_n operand shape", tensors[0], t)
        acc += t.data
    return _result(acc, tensors, lambda g: (g,) * len(tensors))


def scale(a, c):
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (g * g.dtype.type(c),))


def mul(a, b):
    _same_shape("mul operand shape", a, b)
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def sum_all(a):
    shape = a.shape
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def relu(x):
    xd = x.data
    mask = xd > 0
    # maximum (unlike where) propagates NaN, so divergence reaches the loss
    return _result(np.maximum(xd, xd.dtype.type(0)), (x,), lambda g: (g * mask,))


def weighted_sum(weights, tensors):
    """``sum_k weights[k] * tensors[k]`` with ``weights`` a differentiable vector."""
    tensors = list(tensors)
    if weights.shape != (len(tensors),):
        raise ShapeError("weighted_sum weight count", (len(tensors),), weights.shape)
    for t in tensors[1:]:
        _same_shape("weighted_sum operand shape", tensors[0], t)
    w = weights.data
    acc = np.zeros_like(tensors[0].data)
    for k, t in enumerate(tensors):
        acc += w[k] * t.data

    def back(g):
        gw = np.array([np.vdot(g, t.data) for t in tensors], dtype=w.dtype)
        return (gw,) + tuple(g * w[k] for k in range(len(tensors)))

    return _result(acc, (weights, *tensors), back)


def normalize(v, tiny=1e-8):
    """Scale a non-negative vector to sum to one (uniform if its sum is below ``tiny``)."""
    d = v.data
    total = float(d.sum())
    if total < tiny:
        out = np.full_like(d, 1.0 / d.size)
        return _result(out, (v,), lambda g: (np.zeros_like(d),))
    s = d.dtype.type(total)
    out = d / s

    def back(g):
        return (g / s - np.vdot(g, d) / (s * s),)

    return _result(out, (v,), back)


# ---------------------------------------------------------------------------
# convolution, pooling, normalization


def conv2d(x, weight, stride=1, padding=0, method=None):
    """Bias-free cross-correlation of an N,C,H,W input with Cout,Cin,kh,kw filters.

    ``method`` selects the forward kernel: ``"im2col"`` (default, matmul over
    unfolded patches) or ``"direct"`` (nested-loop accumulation). Both share
    the same backward rule.
    """
    if x.data.ndim != 4:
        raise ShapeError("conv2d input rank", 4, x.data.ndim)
    if weight.data.ndim != 4:
        raise ShapeError("conv2d weight rank", 4, weight.data.ndim)
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError("conv2d channels (weight in-channels vs input channels)", wcin, cin)
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d kernel vs padded input size", (h + 2 * padding, w + 2 * padding), (kh, kw))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    method = method or CONV_METHOD
    xd, wd = x.data, weight.data
    w2 = wd.reshape(cout, -1)

    if kh == 1 and kw == 1 and padding == 0:
        xs = xd[:, :, ::stride, ::stride] if stride > 1 else xd
        xs = np.ascontiguousarray(xs).reshape(n, cin, ho * wo)
        out = np.matmul(w2, xs).reshape(n, cout, ho, wo)

        def back(g):
            g2 = g.reshape(n, cout, ho * wo)
            gw = np.tensordot(g2, xs, axes=([0, 2], [0, 2])).reshape(wd.shape)
            gxs = np.matmul(w2.T, g2).reshape(n, cin, ho, wo)
            if stride > 1:
                gx = np.zeros_like(xd)
                gx[:, :, ::stride, ::stride] = gxs
            else:
                gx = gxs
            return gx, gw

        return _result(out, (x, weight), back)

    if method == "direct":
        out = kernels.conv2d_direct(xd, wd, stride, padding)
        cols = None
    elif method == "im2col":
        cols = kernels.im2col(xd, kh, kw, stride, padding)
        out = np.matmul(w2, cols).reshape(n, cout, ho, wo)
    else:
        raise ValueError(f"unknown conv method {method!r}")

    def back(g):
        c = cols if cols is not None else kernels.im2col(xd, kh, kw, stride, padding)
        g2 = g.reshape(n, cout, ho * wo)
        gw = np.tensordot(g2, c, axes=([0, 2], [0, 2])).reshape(wd.shape)
        gcols = np.matmul(w2.T, g2)
        gx = kernels.col2im(gcols, xd.shape, kh, kw, stride, padding)
        return gx, gw

    return _result(out, (x, weight), back)


class BatchNormState:
    """Per-channel affine parameters and running statistics."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    @property
    def channels(self):
        return self.gamma.shape[0]


def batch_norm(x, state, training):
    if x.data.ndim != 4:
        raise ShapeError("batch_norm input rank", 4, x.data.ndim)
    n, c, h, w = x.shape
    if c != state.channels:
        raise ShapeError("batch_norm channels", state.channels, c)
    xd = x.data
    dt = xd.dtype.type
    gamma = state.gamma.data.reshape(1, c, 1, 1)
    beta = state.beta.data.reshape(1, c, 1, 1)
    if training:
        count = n * h * w
        if count < 2:
            raise ShapeError("batch_norm training needs N*H*W >= 2", 2, count)
        mean = xd.mean(axis=(0, 2, 3))
        centered = xd - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = (1.0 / np.sqrt(var + dt(state.eps))).astype(xd.dtype)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        m = dt(state.momentum)
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var * dt(count / (count - 1))

        def back(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * gamma
            s1 = gxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            gx = (inv_std.reshape(1, c, 1, 1) / dt(count)) * (dt(count) * gxhat - s1 - xhat * s2)
            return gx, ggamma, gbeta
    else:
        inv_std = (1.0 / np.sqrt(state.running_var + dt(state.eps))).astype(xd.dtype)
        xhat = (xd - state.running_mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def back(g):
            return (
                g * gamma * inv_std.reshape(1, c, 1, 1),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

    return _result(xhat * gamma + beta, (x, state.gamma, state.beta), back)


def max_pool2d(x, kernel=3, stride=2, padding=1):
    n, c, h, w = x.shape
    xd = x.data
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gp = np.zeros(xp.shape, dtype=g.dtype)
        oy, ox = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        iy = oy * stride + arg // kernel
        ix = ox * stride + arg % kernel
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gp, (ni, ci, iy, ix), g)
        return (gp[:, :, padding:padding + h, padding:padding + w].copy(),)

    return _result(np.ascontiguousarray(out), (x,), back)


def global_avg_pool(x):
    n, c, h, w = x.shape
    dt = x.data.dtype.type
    out = x.data.mean(axis=(2, 3))
    return _result(out, (x,), lambda g: (np.broadcast_to((g / dt(h * w))[:, :, None, None], (n, c, h, w)).copy(),))


def linear(x, weight, bias):
    if x.shape[1] != weight.shape[1]:
        raise ShapeError("linear in-features", weight.shape[1], x.shape[1])
    if bias.shape != (weight.shape[0],):
        raise ShapeError("linear bias length", (weight.shape[0],), bias.shape)
    xd, wd = x.data, weight.data
    out = xd @ wd.T + bias.data

    def back(g):
        return g @ wd, g.T @ xd, g.sum(axis=0)

    return _result(out, (x, weight, bias), back)


def classifier_head(x, weight, bias):
    """Global average pool over H,W followed by an affine map; returns logits."""
    if x.data.ndim != 4:
        raise ShapeError("classifier_head input rank", 4, x.data.ndim)
    if weight.shape[1] != x.shape[1]:
        raise ShapeError("classifier_head weight columns vs channels", x.shape[1], weight.shape[1])
    return linear(global_avg_pool(x), weight, bias)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    z = logits.data
    if z.ndim != 2:
        raise ShapeError("softmax_cross_entropy logits rank", 2, z.ndim)
    n, k = z.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError("softmax_cross_entropy label count", n, labels.shape[0])
    bad = np.flatnonzero((labels < 0) | (labels >= k))
    if bad.size:
        i = int(bad[0])
        raise LabelError(i, int(labels[i]), k)
    shifted = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - shifted[rows, labels]).mean()
    prob = np.exp(shifted - lse[:, None])

    def back(g):
        d = prob.copy()
        d[rows, labels] -= 1
        return (d * (g / n),)

    return _result(np.asarray(loss, dtype=z.dtype), (logits,), back)
