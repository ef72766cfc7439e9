"""64-bit FNV-1a, used for per-region and footer integrity checks."""

import numpy as np
from numba import njit

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


@njit(cache=True)
def _fnv1a_kernel(data, h):
    prime = np.uint64(FNV_PRIME)
    for i in range(data.shape[0]):
        h = (h ^ np.uint64(data[i])) * prime
    return h


def fnv1a64(data, seed: int = FNV_OFFSET) -> int:
    """Hash a bytes-like object. ``seed`` continues a previous hash."""
    view = memoryview(data).cast("B")
    if len(view) < 64:
        h = seed
        for b in view:
            h = ((h ^ b) * FNV_PRIME) & _MASK
        return h
    arr = np.frombuffer(view, dtype=np.uint8)
    return int(_fnv1a_kernel(arr, np.uint64(seed)))
