"""splitmix64 streams and the experiment seed-derivation scheme.

Every random draw in the package goes through this module so that runs are
bit-reproducible across platforms and thread counts.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MUL1 = 0xBF58476D1CE4E5B9
_MUL2 = 0x94D049BB133111EB

# model-tag codes used in seed derivation
TAG_EXPERT = 0
TAG_BASE = 1
TAG_EMA = 2
TAG_EVAL = 3  # reserved for evaluation rollouts
# internal streams (never used for rollouts)
TAG_POLICY = 4
TAG_SELECTOR = 5
TAG_SELECT = 6
TAG_HOLDOUT = 7

EVAL_ROUND = 2**32 - 1

SOURCE_TAGS = {"expert": TAG_EXPERT, "base": TAG_BASE, "ema": TAG_EMA}


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MUL1) & MASK64
    z = ((z ^ (z >> 27)) * _MUL2) & MASK64
    return z ^ (z >> 31)


def sm64(x: int) -> int:
    """One splitmix64 output step from state ``x``."""
    return _mix((x + GOLDEN_GAMMA) & MASK64)


def derive_seed(master_seed: int, round_idx: int, tag: int, task_id: int, rollout_idx: int) -> int:
    s = sm64((master_seed ^ round_idx) & MASK64)
    s = sm64(s ^ tag)
    s = sm64(s ^ task_id)
    return sm64(s ^ rollout_idx)


class SplitMix64:
    """Stateful splitmix64 generator.

    Scalar draws are pure Python integers; ``block`` produces the next ``n``
    outputs at once with wrapping uint64 numpy arithmetic and advances the
    state exactly as ``n`` scalar draws would.
    """

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        return _mix(self.state)

    def uniform(self) -> float:
        # 24-bit mantissa: exactly representable as float32
        return (self.next_u64() >> 40) / 16777216.0

    def symmetric(self, d: float) -> float:
        return d * (2.0 * self.uniform() - 1.0)

    def randbelow(self, n: int) -> int:
        return (self.next_u64() * n) >> 64

    def permutation(self, n: int) -> list[int]:
        idx = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            idx[i], idx[j] = idx[j], idx[i]
        return idx

    def block(self, n: int) -> np.ndarray:
        k = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self.state) + k * np.uint64(GOLDEN_GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MUL1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MUL2)
        z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * GOLDEN_GAMMA) & MASK64
        return z

    def uniform_block(self, n: int) -> np.ndarray:
        return (self.block(n) >> np.uint64(40)).astype(np.float64) / 16777216.0
