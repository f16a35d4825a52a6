"""Timing of the kernel backends and of training steps with and without gate learning."""
import time

import numpy as np

from . import kernels
from . import rng as rngmod
from .arch import build_network
from .trainer import OptimizerState, Phase, train_step


def _best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def bench_kernels(shape=(32, 16, 16, 16), cout=16, ksize=3, stride=1, pad=1, repeats=5, seed=0):
    """Seconds per call of each kernel for every importable backend, plus their max output difference."""
    rng = rngmod.stream(seed, "bench")
    x = rng.normal(size=shape).astype(np.float32)
    w = rng.normal(size=(cout, shape[1], ksize, ksize)).astype(np.float32)
    backends = ["python"]
    try:
        kernels.backend_module("compiled")
        backends.insert(0, "compiled")
    except ImportError:
        pass
    out = {}
    results = {}
    for name in backends:
        mod = kernels.backend_module(name)
        cols = mod.im2col(x, ksize, ksize, stride, pad)
        results[name] = (cols, mod.conv2d_direct(x, w, stride, pad))
        out[name] = {
            "im2col": _best_of(lambda: mod.im2col(x, ksize, ksize, stride, pad), repeats),
            "col2im": _best_of(lambda: mod.col2im(cols, x.shape, ksize, ksize, stride, pad), repeats),
            "conv2d_direct": _best_of(lambda: mod.conv2d_direct(x, w, stride, pad), repeats),
        }
    if len(results) == 2:
        (c1, d1), (c2, d2) = results["compiled"], results["python"]
        out["max_abs_diff"] = {
            "im2col": float(np.abs(c1 - c2).max()),
            "conv2d_direct": float(np.abs(d1 - d2).max()),
        }
    out["active_backend"] = kernels.BACKEND
    out["shape"] = list(shape)
    return out


def bench_steps(spec, batch_size=64, steps=5, seed=0, warmup=1):
    """Mean seconds per training step in learned mode versus full connectivity."""
    rng = rngmod.stream(seed, "bench", 1)
    images = rng.normal(size=(batch_size, *spec.input_shape)).astype(np.float32)
    labels = rng.integers(0, spec.num_classes, size=batch_size)
    out = {}
    for mode, gate_lr in (("learned", 0.2), ("full", 0.0)):
        net = build_network(spec, seed)
        opt = OptimizerState()
        phase = Phase(1, 0.1, gate_lr, mode)
        for s in range(warmup):
            train_step(net, (images, labels), phase, opt, rngmod.stream(seed, "gates", s), s)
        t = time.perf_counter()
        for s in range(steps):
            train_step(net, (images, labels), phase, opt, rngmod.stream(seed, "gates", s), s)
        out[mode] = (time.perf_counter() - t) / steps
    out["learned_over_full"] = out["learned"] / out["full"]
    return out
