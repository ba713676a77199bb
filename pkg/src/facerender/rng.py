"""Counter-based deterministic random number generation.

All stochastic choices in this project (weight init, data synthesis,
batch sampling, flow sampling) draw from SplitMix64 streams so that runs
are bit-reproducible and independent of platform RNG implementations.

SplitMix64 reference: Steele, Lea & Flood, "Fast splittable pseudorandom
number generators" (the java.util.SplittableRandom finalizer). Each draw
mixes ``seed + (counter+1) * GOLDEN`` through two xor-shift-multiply
rounds, so a stream is a pure function of (seed, counter).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = 0xFFFFFFFFFFFFFFFF


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h = ((h ^ byte) * 0x100000001B3) & _U64_MASK
    return h


class Rng:
    """A deterministic stream of uniforms/normals with a draw counter."""

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _U64_MASK
        self.counter = int(counter)

    def _raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GOLDEN)

    def uniform(self, *shape: int) -> np.ndarray:
        """Uniform float64 in [0, 1), shape ``shape`` (scalar if empty)."""
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        return u.reshape(shape) if shape else u[0]

    def normal(self, *shape: int, std: float = 1.0) -> np.ndarray:
        """Standard normals via Box-Muller (pairs of uniforms)."""
        n = int(np.prod(shape)) if shape else 1
        m = (n + 1) // 2
        u1 = 1.0 - (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        u2 = (self._raw(m) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.concatenate([r * np.cos(2.0 * np.pi * u2), r * np.sin(2.0 * np.pi * u2)])[:n]
        z *= std
        return z.reshape(shape) if shape else z[0]

    def integers(self, low: int, high: int, *shape: int) -> np.ndarray:
        """Integers in [low, high) by multiply-shift of the raw stream."""
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        n = int(np.prod(shape)) if shape else 1
        span = np.uint64(high - low)
        # 128-bit multiply-high avoids modulo bias beyond 2^-64.
        raw = self._raw(n)
        hi = ((raw.astype(object) * int(span)) >> 64).astype(np.uint64)
        out = (hi + np.uint64(low & _U64_MASK)).astype(np.int64)
        return out.reshape(shape) if shape else int(out[0])

    def derive(self, *labels) -> "Rng":
        """Independent child stream keyed by string/int labels (stateless)."""
        key = np.uint64(self.seed)
        with np.errstate(over="ignore"):
            for label in labels:
                tag = _fnv1a64(label) if isinstance(label, str) else (int(label) & _U64_MASK)
                key = _mix(np.uint64((int(key) ^ tag) & _U64_MASK) + _GOLDEN)
        return Rng(int(key))

    def state(self) -> dict:
        return {"seed": int(self.seed), "counter": int(self.counter)}

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        return cls(state["seed"], state["counter"])

    def digest(self) -> str:
        """Short hex fingerprint of the current stream position."""
        with np.errstate(over="ignore"):
            z = _mix(np.uint64(self.seed) + np.uint64(self.counter & _U64_MASK) * _GOLDEN)
        return f"{int(z):016x}"
