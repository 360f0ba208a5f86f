"""Named, splittable random streams on top of numpy's Philox counter generator.

A stream is identified by a 64-bit seed plus a path of names. Splitting hashes
the path into a fresh Philox key, so ``Stream(0).split("data")`` yields the
same numbers on every run and platform regardless of what other streams did.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key(seed: int, path: tuple[str, ...]) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(int(seed).to_bytes(8, "little", signed=False))
    for part in path:
        h.update(b"/")
        h.update(part.encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


class Stream:
    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(path)
        self.gen = np.random.Generator(np.random.Philox(key=_key(self.seed, self.path)))

    def split(self, name: str | int) -> "Stream":
        return Stream(self.seed, self.path + (str(name),))

    def __repr__(self) -> str:
        return f"Stream(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    # thin pass-throughs so callers can treat a Stream like a Generator
    def normal(self, *a, **k):
        return self.gen.normal(*a, **k)

    def standard_normal(self, *a, **k):
        return self.gen.standard_normal(*a, **k)

    def uniform(self, *a, **k):
        return self.gen.uniform(*a, **k)

    def integers(self, *a, **k):
        return self.gen.integers(*a, **k)

    def permutation(self, *a, **k):
        return self.gen.permutation(*a, **k)

    def random(self, *a, **k):
        return self.gen.random(*a, **k)
