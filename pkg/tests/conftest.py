import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from branchgate.arch import ArchSpec, PRESETS, StageSpec, build_network  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_spec():
    return PRESETS["toy-{11,2,4}"]


@pytest.fixture
def toy_net(toy_spec):
    return build_network(toy_spec, init_seed=0)


def small_spec(cardinality=3, fan_in=1, modules=3, classes=3, size=8):
    """A few narrow modules on tiny inputs; channel change on module 2 forces a projection."""
    stages = [StageSpec(1, 4, 2, 6, 1)]
    prev = 6
    for m in range(1, modules):
        out = 8 if m == 1 else prev
        stages.append(StageSpec(1, prev, 2, out, 2 if m == 1 else 1))
        prev = out
    return ArchSpec(
        depth=2 + 3 * modules,
        bottleneck_width=2,
        cardinality=cardinality,
        fan_in=fan_in,
        num_classes=classes,
        stages=tuple(stages),
        stem_channels=4,
        input_shape=(3, size, size),
        name="small",
    )


@pytest.fixture
def small():
    return small_spec


def randomize_bn(net, rng):
    """Non-trivial BN affine parameters and running statistics."""
    for _, p in net.named_parameters():
        if p.data.ndim == 1:
            p.data[...] = rng.normal(scale=0.5, size=p.shape) + (1.0 if p.data.mean() == 1 else 0.0)
    for name, b in net.named_buffers():
        if name.endswith("running_var"):
            b[...] = rng.uniform(0.5, 2.0, size=b.shape)
        else:
            b[...] = rng.normal(scale=0.3, size=b.shape)
