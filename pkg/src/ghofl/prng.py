"""Counter-based 64-bit generator shared by every party that needs public randomness.

The generator is SplitMix64 used in counter mode, so element ``i`` of a stream is
computable without generating elements ``0..i-1``:

    mix(z):
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
        z = (z ^ (z >> 27)) * 0x94D049BB133111EB
        return z ^ (z >> 31)

    stream(key)[i] = mix(key + (i + 1) * 0x9E3779B97F4A7C15)      (all mod 2**64)

Keys for sub-streams are derived by folding integer words into a seed:

    derive_key(seed, w1, ..., wn):
        k = mix(seed)
        for w in words: k = mix(k ^ mix(w + 0x9E3779B97F4A7C15))

Uniforms take the top 53 bits, ``u = ((bits >> 11) + 0.5) * 2**-53`` (open interval
(0, 1)).  Gaussian number ``j`` is the Box-Muller transform of uniforms ``2*(j//2)``
and ``2*(j//2) + 1``::

    r = sqrt(-2 ln u_a);  g_j = r cos(2 pi u_b) if j even else r sin(2 pi u_b)
"""

from __future__ import annotations

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix_array(z: np.ndarray) -> np.ndarray:
    z = z.copy()
    z ^= z >> np.uint64(30)
    z *= _M1
    z ^= z >> np.uint64(27)
    z *= _M2
    z ^= z >> np.uint64(31)
    return z


def mix64(x: int) -> int:
    """Scalar SplitMix64 finalizer on a Python int."""
    z = x & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, *words: int) -> int:
    k = mix64(seed)
    for w in words:
        k = mix64(k ^ mix64((w + GOLDEN_GAMMA) & MASK64))
    return k


def random_bits(key: int, count: int, start: int = 0) -> np.ndarray:
    """``count`` uint64 values of ``stream(key)`` beginning at index ``start``."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(key & MASK64) + idx * np.uint64(GOLDEN_GAMMA)
        return _mix_array(z)


def uniforms(key: int, count: int, start: int = 0) -> np.ndarray:
    bits = random_bits(key, count, start)
    return ((bits >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def gaussians(key: int, count: int) -> np.ndarray:
    """``count`` standard normal draws from the Box-Muller transform of ``stream(key)``."""
    pairs = (count + 1) // 2
    u = uniforms(key, 2 * pairs)
    r = np.sqrt(-2.0 * np.log(u[0::2]))
    theta = 2.0 * np.pi * u[1::2]
    out = np.empty(2 * pairs)
    out[0::2] = r * np.cos(theta)
    out[1::2] = r * np.sin(theta)
    return out[:count]
