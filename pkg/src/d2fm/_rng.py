"""Named random sub-streams derived from a single integer seed."""

import zlib

import numpy as np


def substream(seed, name):
    """Return a Generator for the stream ``name`` of ``seed``.

    Streams with different names are statistically independent, and the
    same (seed, name) pair always yields the same sequence.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng([int(seed), key])
