"""SplitMix64 stream, vectorised with numpy.

Output ``i`` (0-based) of a generator seeded with ``seed`` is
``mix(seed + (i + 1) * GAMMA)`` in wrapping 64-bit arithmetic, which is exactly
what the sequential update ``state += GAMMA; return mix(state)`` produces.
"""

from __future__ import annotations

import numpy as np

GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.uint64, copy=True)
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def splitmix64_scalar(state: int) -> tuple[int, int]:
    """One sequential step: returns ``(new_state, output)``. Reference form."""
    state = (state + GAMMA) & _MASK
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return state, z ^ (z >> 31)


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & _MASK

    def next_u64(self, n: int) -> np.ndarray:
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            raw = np.uint64(self.state) + steps * np.uint64(GAMMA)
        self.state = (self.state + n * GAMMA) & _MASK
        return mix64(raw)

    def uniform(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) built from the top 53 bits of each output."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform_sym(self, shape, bound: float) -> np.ndarray:
        n = int(np.prod(shape))
        return (bound * (2.0 * self.uniform(n) - 1.0)).reshape(shape)
