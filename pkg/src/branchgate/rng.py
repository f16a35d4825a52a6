"""Seeded random streams.

Every stochastic draw in a run comes from a generator keyed by the run seed,
a purpose tag and integer counters (epoch, batch, step). Streams are therefore
independent of call order, and a run's random state is fully described by
its seed plus its position in the schedule.
"""
import zlib

import numpy as np

TAGS = ("init", "shuffle", "augment", "gates", "fixed_random", "synth", "bench")


def _tag_id(tag):
    return zlib.crc32(tag.encode("utf-8"))


def stream(seed, tag, *counters):
    """A fresh ``numpy.random.Generator`` for ``(seed, tag, *counters)``."""
    key = [int(seed) & 0xFFFFFFFF, _tag_id(tag), *(int(c) for c in counters)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
