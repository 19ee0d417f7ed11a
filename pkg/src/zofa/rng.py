"""Counter-based keyed random streams for regenerable perturbations.

Every value is a pure function of (key, position): there is no generator
state to store, so a perturbation can be thrown away and regenerated later
from its key alone. The algorithm is frozen because stored fixtures depend
on it bit-for-bit:

  * stream word j of key k:  splitmix64_finalizer(k + (j+1) * GOLDEN)
  * double in (0, 1):        ((word >> 11) + 0.5) * 2**-53
  * standard normals:        Box-Muller on consecutive uniform pairs,
                             cosine block first, then sine block, truncated
                             to the requested length

All arithmetic is on uint64 numpy arrays (scalar uint64 ops would emit
overflow warnings; array ops wrap silently, which is what we want).
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SEED0 = np.uint64(0xD1B54A32D192ED03)

_MASK64 = (1 << 64) - 1
_INV53 = 2.0 ** -53
_TWO_PI = 2.0 * np.pi


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def _as_u64(part) -> np.ndarray:
    a = np.asarray(part)
    if a.dtype == np.uint64:
        return a
    if a.dtype.kind in "iu":
        return a.astype(np.int64).astype(np.uint64)  # two's-complement wrap
    flat = np.array([int(v) & _MASK64 for v in np.atleast_1d(a).ravel()], dtype=np.uint64)
    return flat.reshape(np.atleast_1d(a).shape)


def derive_keys(*parts) -> np.ndarray:
    """Vectorized key derivation; parts broadcast against each other."""
    arrs = np.broadcast_arrays(*[_as_u64(p) for p in parts])
    k = np.full(arrs[0].shape, _SEED0, dtype=np.uint64)
    for a in arrs:
        k = _finalize((k ^ a) + _GOLDEN)
    return k


def derive_key(*parts: int) -> int:
    """Collapse any number of integers into one 64-bit stream key."""
    one = [np.array([int(p) & _MASK64], dtype=np.uint64) for p in parts]
    return int(derive_keys(*one)[0])


def _words(keys: np.ndarray, n: int) -> np.ndarray:
    # counter stream: word j = finalize(key + (j+1)*GOLDEN), shape [..., n]
    ctr = (np.arange(1, n + 1, dtype=np.uint64) * _GOLDEN)
    return _finalize(keys[..., None] + ctr)


def uniforms(keys, n: int) -> np.ndarray:
    """Doubles in the open interval (0, 1); shape = keys.shape + (n,)."""
    keys = np.asarray(keys, dtype=np.uint64)
    w = _words(keys, n)
    return ((w >> np.uint64(11)).astype(np.float64) + 0.5) * _INV53


def normals(keys, n: int) -> np.ndarray:
    """Standard normal draws; shape = keys.shape + (n,)."""
    keys = np.asarray(keys, dtype=np.uint64)
    m = (n + 1) // 2
    u = uniforms(keys, 2 * m)
    u1 = u[..., :m]
    u2 = u[..., m:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(_TWO_PI * u2), r * np.sin(_TWO_PI * u2)], axis=-1)
    return z[..., :n]


def uniform_open(keys, n: int, low: float = 0.0, high: float = 2.0) -> np.ndarray:
    """Uniform draws on the open interval (low, high)."""
    return low + (high - low) * uniforms(keys, n)
