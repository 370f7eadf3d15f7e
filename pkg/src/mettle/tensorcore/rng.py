"""Counter-based pseudo-random generator with a documented algorithm.

The stream is SplitMix64 evaluated at explicit counter positions:

    out[i] = mix64((seed + (i + 1) * 0x9E3779B97F4A7C15) mod 2^64)

where mix64 is the standard SplitMix64 finalizer. Because each draw is a
pure function of (seed, i), identical seeds produce identical streams on
every platform, and independent child streams can be derived from string
keys without consuming parent state.
"""

from __future__ import annotations

import math

import numpy as np

from .engine import default_dtype

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64 = np.uint64


def _mix64(z: np.ndarray) -> np.ndarray:
    # 64-bit wraparound is the algorithm, not an error
    with np.errstate(over="ignore"):
        z = (z ^ (z >> _U64(30))) * _MIX1
        z = (z ^ (z >> _U64(27))) * _MIX2
        return z ^ (z >> _U64(31))


class Rng:
    """Deterministic counter-based generator (SplitMix64 stream)."""

    algorithm = "splitmix64-counter"

    def __init__(self, seed: int):
        self.seed = _U64(int(seed) & 0xFFFFFFFFFFFFFFFF)
        self._counter = 0

    def derive(self, key: str) -> "Rng":
        """Independent child stream named by a string key; parent state untouched."""
        h = self.seed
        with np.errstate(over="ignore"):
            for b in key.encode("utf-8"):
                h = _mix64(h + _U64(b + 1) * _GOLDEN)
        return Rng(int(h))

    def raw(self, n: int) -> np.ndarray:
        """Next n raw 64-bit words."""
        idx = np.arange(self._counter + 1, self._counter + n + 1, dtype=np.uint64)
        self._counter += n
        with np.errstate(over="ignore"):
            return _mix64(self.seed + idx * _GOLDEN)

    def uniform(self, shape) -> np.ndarray:
        """IID uniform [0, 1) at 53-bit resolution."""
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        u = (self.raw(n) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape).astype(default_dtype())

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """IID normal via Box-Muller (no rejection, so counts are shape-determined)."""
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = (self.raw(m) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        u2 = (self.raw(m) >> _U64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log1p(-u1))
        theta = (2.0 * math.pi) * u2
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]
        return (mean + std * z).reshape(shape).astype(default_dtype())

    def integers(self, low: int, high: int, shape) -> np.ndarray:
        """Uniform integers in [low, high) by scaling the 53-bit uniform stream."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        u = self.uniform(shape).astype(np.float64)
        return (low + np.floor(u * (high - low))).astype(np.int64)

    def xavier_uniform(self, shape) -> np.ndarray:
        """Glorot-uniform init; fan-in/out from the last two axes (or the vector length)."""
        shape = tuple(int(s) for s in shape)
        if len(shape) >= 2:
            fan_in, fan_out = shape[-2], shape[-1]
        else:
            fan_in = fan_out = shape[0] if shape else 1
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return (self.uniform(shape) * 2.0 - 1.0) * bound
