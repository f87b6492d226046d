"""Seeded random streams.

All randomness goes through Philox, a counter-based bit generator. Each
consumer asks for a named stream; the name is hashed into the spawn key of
a ``SeedSequence`` so that, for the same user seed, phantom draws, noise
draws, training draws and weight initialisation never share a stream.
"""

import hashlib

import numpy as np

STREAMS = ("phantom", "noise", "init", "train", "eval")


def _stream_key(name):
    digest = hashlib.sha256(name.encode("utf8")).digest()
    return int.from_bytes(digest[:4], "little")


def make_rng(seed, stream, *extra):
    """Return a ``numpy.random.Generator`` for ``(seed, stream, *extra)``.

    ``extra`` integers extend the spawn key, e.g. a sample index, so that
    sample ``i`` of a dataset is reproducible without drawing samples
    ``0..i-1`` first.
    """
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
    key = (_stream_key(stream),) + tuple(int(e) for e in extra)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
