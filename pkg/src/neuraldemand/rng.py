"""Seedable, counter-based random streams.

Every random quantity in the package is derived from the uniform stream of a
Philox-4x64-10 counter-based generator (numpy's ``Philox`` bit generator).
Named sub-streams are keyed by hashing ``(seed, name)`` with SHA-256, so the
draws for e.g. data generation and weight initialisation never interact.

Normals use the Box-Muller transform on that uniform stream, permutations are
argsorts of uniforms and integers are floors of scaled uniforms. Nothing
depends on numpy's own (version-dependent) normal or shuffle algorithms, which
keeps golden values portable.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = ["Stream"]


def _key(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


class Stream:
    """A named uniform stream with Box-Muller normals.

    Parameters
    ----------
    seed : int
        Base seed.
    name : str
        Stream name. Different names give statistically independent streams.
    """

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        self._gen = np.random.Generator(np.random.Philox(key=_key(seed, name)))

    def child(self, name: str) -> "Stream":
        return Stream(self.seed, f"{self.name}/{name}")

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        u = self._gen.random(size)
        return low + (high - low) * u

    def normal(self, loc=0.0, scale=1.0, size=None) -> np.ndarray:
        shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = self._gen.random(m)
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log1p(-u1))  # 1 - u1 in (0, 1]
        z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])[:n]
        z = loc + scale * z
        return z.reshape(shape) if shape else float(z[0])

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self._gen.random(n), kind="stable")

    def integers(self, high: int, size=None) -> np.ndarray:
        u = self._gen.random(size)
        return np.minimum((u * high).astype(np.int64), high - 1)
