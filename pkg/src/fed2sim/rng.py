"""Seeded, order-independent random streams."""
from __future__ import annotations

import numpy as np

# stream namespaces, mixed into the spawn key so streams never collide
INIT = 1
TRAIN = 2
DATA = 3
PARTITION = 4
PROBE = 5
SCRAMBLE = 6


class RngStream:
    """A random stream fully determined by ``(seed, stream_id)``.

    ``stream_id`` may be an int or a tuple of ints. Two streams with distinct ids
    are statistically independent and drawing from one never shifts the other.
    """

    def __init__(self, seed: int, stream_id: int | tuple[int, ...] = 0):
        if isinstance(stream_id, int):
            stream_id = (stream_id,)
        self.seed = int(seed)
        self.stream_id = tuple(int(s) for s in stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        self.generator = np.random.Generator(np.random.PCG64(ss))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(ids))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)
