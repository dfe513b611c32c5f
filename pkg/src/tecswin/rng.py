"""Deterministic random streams.

Uniform bits come from numpy's Philox4x64 counter-based generator seeded
through ``SeedSequence``; both are specified bit-for-bit, so a seed yields
the same stream on every platform. Gaussians use the Box-Muller transform
on top of those uniforms rather than numpy's ziggurat sampler.
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "philox4x64+box-muller"


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFF
    digest = hashlib.blake2b(str(part).encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


class Rng:
    """Seeded stream; ``fork`` derives independent named sub-streams."""

    algorithm = ALGORITHM

    def __init__(self, seed: int, _spawn_key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        self.seed = int(seed)
        self.spawn_key = tuple(_spawn_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def fork(self, *keys) -> "Rng":
        return Rng(self.seed, self.spawn_key + tuple(_key(k) for k in keys))

    def uniform(self, shape=(), low: float = 0.0, high: float = 1.0) -> np.ndarray:
        return low + (high - low) * self._gen.random(shape)

    def normal(self, shape=(), std: float = 1.0, dtype=np.float32) -> np.ndarray:
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - self._gen.random(m)  # (0, 1]
        u2 = self._gen.random(m)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (std * z).reshape(shape).astype(dtype)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        """Uniform integers in ``[low, high)``."""
        return self._gen.integers(low, high, size=shape, dtype=np.int64)

    def bernoulli(self, p: float, shape=()) -> np.ndarray:
        return self._gen.random(shape) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)
