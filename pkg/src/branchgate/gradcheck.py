"""Central finite-difference checks against tape gradients."""
import numpy as np

from .tensor import Tape, Tensor


def max_relative_error(a, b, floor=1e-8, scale_floor=0.0):
    """Largest ``|a-b| / max(|a|, |b|, floor, scale_floor * max|a|)`` over all coordinates.

    A positive ``scale_floor`` measures coordinates that are tiny next to the
    tensor's largest gradient against that scale instead of their own, so
    finite-difference roundoff on near-zero entries is not reported as error.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0:
        return 0.0
    floor = max(floor, scale_floor * max(np.abs(a).max(), np.abs(b).max()))
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def _ad_grads(loss_fn, tensors):
    with Tape() as tape:
        loss = loss_fn()
    if not loss.requires_grad:
        return [np.zeros_like(t.data) for t in tensors]
    grads = tape.backward(loss)
    return [np.asarray(grads.get(t, np.zeros_like(t.data))) for t in tensors]


def numerical_gradient(loss_fn, tensor, eps, coords=None):
    """Central differences of ``loss_fn()`` w.r.t. selected flat coordinates of ``tensor``."""
    flat = tensor.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(flat.size)
    for i in coords:
        orig = flat[i]
        flat[i] = orig + eps
        up = float(loss_fn().data)
        flat[i] = orig - eps
        down = float(loss_fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2 * eps)
    return out.reshape(tensor.shape)


def finite_difference_check(f, point, eps=1e-6):
    """Max relative error between the tape gradient of scalar ``f`` at ``point`` and central differences.

    ``point`` is perturbed in place and restored; ``f`` takes the tensor and
    returns a scalar tensor.
    """
    x = point if isinstance(point, Tensor) else Tensor(point)
    x.requires_grad = True
    (ad,) = _ad_grads(lambda: f(x), [x])
    fd = numerical_gradient(lambda: f(x), x, eps)
    return max_relative_error(ad, fd)


def check_tensors(loss_fn, tensors, eps=1e-6, max_coords=None, rng=None, scale_floor=0.0):
    """Compare tape and finite-difference gradients for several tensors at once.

    Returns ``{index: max relative error}``. With ``max_coords`` only that many
    randomly chosen coordinates per tensor are differenced.
    """
    ad = _ad_grads(loss_fn, tensors)
    errors = {}
    for k, t in enumerate(tensors):
        coords = None
        if max_coords is not None and t.size > max_coords:
            rng = rng if rng is not None else np.random.default_rng(0)
            coords = np.sort(rng.choice(t.size, size=max_coords, replace=False))
        fd = numerical_gradient(loss_fn, t, eps, coords)
        if coords is None:
            errors[k] = max_relative_error(ad[k], fd, scale_floor=scale_floor)
        else:
            a = ad[k].reshape(-1)
            floor = scale_floor * np.abs(a).max()
            errors[k] = max_relative_error(a[coords], fd.reshape(-1)[coords], max(1e-8, floor))
    return errors
