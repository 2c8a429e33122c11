"""Counter-based random substreams.

Every (seed, stream, inner iteration, row) tuple maps to its own key through
the SplitMix64 finalizer, and the j-th draw of a key is the finalizer applied
to ``key + (j + 1) * golden``. No generator state is shared between rows, so
results do not depend on which worker processes which row.
"""
import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK = (1 << 64) - 1


@njit(cache=True)
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def row_key(seed, stream, inner, row):
    h = _mix(seed + _GOLDEN)
    h = _mix(h + _GOLDEN * (stream + np.uint64(1)))
    h = _mix(h + _GOLDEN * (inner + np.uint64(1)))
    return _mix(h + _GOLDEN * (row + np.uint64(1)))


@njit(cache=True)
def uniform(key, j):
    """j-th double in [0, 1) of the stream ``key``."""
    bits = _mix(key + _GOLDEN * (j + np.uint64(1)))
    return np.float64(bits >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def substream_key(seed: int, stream: int, inner: int, row: int) -> np.uint64:
    """Key of the random stream for one row of one inner iteration (row is 0-based)."""
    return row_key(
        np.uint64(int(seed) & _MASK),
        np.uint64(int(stream) & _MASK),
        np.uint64(int(inner) & _MASK),
        np.uint64(int(row) & _MASK),
    )
