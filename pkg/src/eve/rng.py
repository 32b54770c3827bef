"""Named, splittable counter-based random streams.

A stream is addressed by ``(seed, name, *counters)`` and backed by Philox, so
the draws for e.g. ``("mask", step)`` never depend on how many numbers the
``"init"`` or ``"data"`` streams consumed. Resuming a run only needs the seed.
"""
import zlib

import numpy as np


def _key(name):
    return zlib.crc32(name.encode("utf-8"))


def stream(seed, name, *counters):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(_key(name),) + tuple(int(c) for c in counters))
    return np.random.Generator(np.random.Philox(ss))


class Streams:
    def __init__(self, seed):
        self.seed = int(seed)

    def __call__(self, name, *counters):
        return stream(self.seed, name, *counters)

    def state(self):
        return {"kind": "philox-keyed", "seed": self.seed}

    @classmethod
    def from_state(cls, state):
        if state.get("kind") != "philox-keyed":
            raise ValueError(f"unknown rng state kind {state.get('kind')!r}")
        return cls(state["seed"])
