"""Deterministic, portable random number generation.

The generator is counter-based splitmix64: output ``i`` of a stream is the
splitmix64 finalizer applied to ``key + (i+1) * GOLDEN`` (mod 2**64).  Because
each output depends only on (key, index), draws can be produced in vectorized
blocks and independent substreams can be derived by hashing tag values into
the key.  Every quantity derived here (uniforms via the top 53 bits, normals
via Box-Muller, integers via scaled uniforms) is specified exactly in terms
of IEEE-754 double operations, so identical seeds give identical streams on
any platform.
"""

from __future__ import annotations

import math

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64
_INV_2_53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    """splitmix64 finalizer, vectorized over uint64 arrays."""
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def _mix_scalar(z: int) -> int:
    return int(_mix(np.array([z & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0])


class Rng:
    """A seedable counter-based splitmix64 stream.

    Streams are cheap value objects: the state is a 64-bit key plus a draw
    counter.  ``split`` derives an independent child stream from string/int
    tags without disturbing the parent's counter, which keeps generation
    order-independent across program structure (and parallelizable across
    samples).
    """

    __slots__ = ("key", "counter")

    def __init__(self, seed: int):
        self.key = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def split(self, *tags: int | str) -> "Rng":
        """Derive an independent substream keyed by the given tags."""
        key = self.key
        for tag in tags:
            if isinstance(tag, str):
                for byte in tag.encode("utf-8"):
                    key = _mix_scalar((key ^ byte) + int(_GOLDEN))
            else:
                key = _mix_scalar((key ^ (int(tag) & 0xFFFFFFFFFFFFFFFF)) + int(_GOLDEN))
        child = Rng(key)
        return child

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` raw uint64 outputs."""
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        return _mix(_U64(self.key) + idx * _GOLDEN)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform doubles in [low, high) from the top 53 bits of each output."""
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        u = (self.raw(n) >> _U64(11)).astype(np.float64) * _INV_2_53
        out = low + u * (high - low)
        return out.reshape(shape)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller on pairs of open-interval uniforms."""
        n = int(np.prod(shape)) if not isinstance(shape, int) else shape
        pairs = (n + 1) // 2
        # (raw >> 11) + 1 in (0, 2^53] keeps log() finite.
        u1 = ((self.raw(pairs) >> _U64(11)) + _U64(1)).astype(np.float64) * _INV_2_53
        u2 = (self.raw(pairs) >> _U64(11)).astype(np.float64) * _INV_2_53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape)

    def integers(self, shape, n_values: int) -> np.ndarray:
        """Integers in [0, n_values) via scaled uniforms (bias < n/2^53)."""
        u = self.uniform(shape)
        return np.minimum((u * n_values).astype(np.int64), n_values - 1)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) by sorting raw draws."""
        return np.argsort(self.raw(n), kind="stable")
