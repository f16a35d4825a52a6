"""Kernel backend selection.

The compiled Cython extension is used when importable; otherwise the numpy
fallback is used. Setting ``BRANCHGATE_PURE_PYTHON=1`` forces the fallback.
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("BRANCHGATE_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _fallback


def backend_module(name=None):
    """Return the kernel module for ``name`` ('compiled', 'python' or None for the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _fallback
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def im2col(x, kh, kw, stride, pad):
    return _impl.im2col(x, kh, kw, stride, pad)


def col2im(cols, shape, kh, kw, stride, pad):
    return _impl.col2im(cols, tuple(shape), kh, kw, stride, pad)


def conv2d_direct(x, weight, stride, pad):
    return _impl.conv2d_direct(x, weight, stride, pad)
