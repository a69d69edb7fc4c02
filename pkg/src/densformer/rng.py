"""Seeded, platform-independent random stream.

SplitMix64 drives everything: raw 64-bit words, uniforms from the top 53
bits, and Gaussians via Box-Muller on consecutive uniform pairs.  The same
seed yields the same sequence on any platform, which the training loop and
noise synthesis rely on for bit-reproducible runs.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 1.0 / (1 << 53)


def mix64(z: int) -> int:
    """SplitMix64 finalizer; also handy for deriving sub-stream seeds."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class Rng:
    """SplitMix64 generator with vectorized draws.

    All draws consume whole 64-bit words in a documented order, so callers
    can reason about (and checkpoint/restore) the stream position exactly.
    """

    def __init__(self, seed: int):
        self.state = seed & _MASK

    def u64(self, n: int) -> np.ndarray:
        """Next ``n`` raw words as uint64."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + steps * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GOLDEN) & _MASK
        return z

    def below(self, n: int) -> int:
        """Uniform integer in [0, n); consumes one word."""
        if n <= 0:
            raise ValueError("below: n must be positive")
        return int(self.u64(1)[0] % np.uint64(n))

    def uniform(self, n: int) -> np.ndarray:
        """``n`` float64 uniforms in [0, 1); one word each."""
        return (self.u64(n) >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def normal(self, n: int) -> np.ndarray:
        """``n`` standard normals; consumes 2*ceil(n/2) words (Box-Muller)."""
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1 = np.maximum(u[0::2], _INV_2_53)  # keep log() finite
        u2 = u[1::2]
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * pairs, dtype=np.float64)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n]
