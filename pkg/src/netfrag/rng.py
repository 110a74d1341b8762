"""Counter-based random streams.

Every draw is a pure function of ``(seed, stream, counter)``: the key is
derived from seed and stream with the splitmix64 finalizer, and draw ``k``
is ``mix64(key + (k + 1) * GOLDEN)``.  Any language with 64-bit unsigned
wraparound arithmetic reproduces the same integers.
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def mix64(z: int) -> int:
    """splitmix64 output finalizer on a Python int."""
    z &= MASK64
    z = ((z ^ (z >> 30)) * _M1) & MASK64
    z = ((z ^ (z >> 27)) * _M2) & MASK64
    return z ^ (z >> 31)


def _mix64_array(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


class RngStream:
    """Deterministic stream of 64-bit words addressed by a running counter."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = int(stream) & MASK64
        self.key = mix64(self.seed ^ mix64(self.stream + GOLDEN))
        self.counter = 0

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream}, counter={self.counter})"

    def substream(self, stream: int) -> "RngStream":
        """Independent stream keyed by this stream's key and ``stream``."""
        return RngStream(self.key, stream)

    def next_u64(self, n: int) -> np.ndarray:
        n = int(n)
        k = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + k * np.uint64(GOLDEN)
            return _mix64_array(z)

    def draw_uniform(self, n: int = 1) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random bits each."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def draw_gaussian(self, n: int = 1) -> np.ndarray:
        """Standard normals by Box-Muller; consumes two words per value."""
        words = self.next_u64(2 * n).reshape(n, 2) >> np.uint64(11)
        u1 = (words[:, 0].astype(np.float64) + 1.0) * 2.0**-53
        u2 = words[:, 1].astype(np.float64) * 2.0**-53
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def draw_int(self, high: int, n: int = 1) -> np.ndarray:
        """Integers in [0, high)."""
        return np.minimum((self.draw_uniform(n) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort keeps ties (practically impossible) in index order
        return np.argsort(self.draw_uniform(n), kind="stable")


def rng_stream(seed: int, stream: int = 0) -> RngStream:
    return RngStream(seed, stream)
