"""Counter-based Gaussian streams.

Every normal draw is a pure function of ``(seed, stream, index, node, component)``,
so results never depend on how samples are split across workers or chunks.
The mixer is the SplitMix64 finalizer applied to a Weyl-sequence counter.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)

# stream identifiers used across the package
FORWARD = 1
NESTED = 2
DPP_OUTER = 3
DPP_ROOT = 4
ITO = 5
AUDIT = 6
QUERY = 7


def _mix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> _S30)
    z = z * _M1
    z = z ^ (z >> _S27)
    z = z * _M2
    return z ^ (z >> _S31)


def _key(seed: int, stream: int) -> np.uint64:
    with np.errstate(over="ignore"):
        a = _mix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        b = _mix(np.array([(stream * 0x9E3779B1 + 0x632BE5AB) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
        return (_mix(a ^ (b * _GOLDEN)))[0]


def uniforms(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    """Uniform(0, 1] variates, one per uint64 counter."""
    key = _key(seed, stream)
    c = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = _mix(_mix(c * _GOLDEN + key) ^ key)
    # top 53 bits -> (0, 1]
    return ((h >> _S11).astype(np.float64) + 1.0) * (1.0 / 9007199254740992.0)


def normals(seed: int, stream: int, index, node: int, dim: int) -> np.ndarray:
    """Standard normals of shape ``(len(index), dim)`` keyed by path index and node.

    ``index`` may be any non-negative integer array (< 2**38); ``node`` < 2**16; ``dim`` < 2**8.
    """
    idx = np.asarray(index, dtype=np.uint64).reshape(-1, 1)
    comp = np.arange(dim, dtype=np.uint64).reshape(1, -1)
    base = (idx << np.uint64(25)) | (np.uint64(node) << np.uint64(9)) | (comp << np.uint64(1))
    u1 = uniforms(seed, stream, base)
    u2 = uniforms(seed, stream, base | np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)
