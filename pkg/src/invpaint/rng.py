"""Deterministic counter-based random streams.

Every draw is keyed by (seed, stream label, draw index) through a Philox
generator, so values are independent of draw order across streams and of
any thread count: draw index i of stream "noise" is the same no matter
what happened on stream "mask" in between.
"""

from __future__ import annotations

import numpy as np

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return h


class RngStream:
    """A named stream of reproducible draws.

    Each call consumes one draw index; the (seed, label, index) triple fully
    determines the output. Streams with different labels never interact.
    """

    def __init__(self, seed: int, label: str, index: int = 0):
        self.seed = int(seed) & _MASK64
        self.label = label
        self.index = int(index)
        self._key0 = fnv1a64(label.encode("utf-8")) ^ self.seed

    def _generator(self, index: int) -> np.random.Generator:
        key = np.array([self._key0, index & _MASK64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def _next(self) -> np.random.Generator:
        g = self._generator(self.index)
        self.index += 1
        return g

    def normal(self, shape=(), dtype=np.float32) -> np.ndarray:
        """I.i.d. standard normal samples."""
        return self._next().standard_normal(size=shape).astype(dtype)

    def uniform(self, low=0.0, high=1.0, shape=(), dtype=np.float32) -> np.ndarray:
        return self._next().uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high, shape=()) -> np.ndarray:
        """Uniform integers in [low, high)."""
        return self._next().integers(low, high, size=shape)

    def fork(self, sublabel: str) -> "RngStream":
        """Derived stream with an extended label, starting at index 0."""
        return RngStream(self.seed, f"{self.label}/{sublabel}")


class RngBank:
    """Factory for named streams sharing one seed.

    Asking for the same label twice returns the same (stateful) stream.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, RngStream] = {}

    def stream(self, label: str) -> RngStream:
        if label not in self._streams:
            self._streams[label] = RngStream(self.seed, label)
        return self._streams[label]
