"""Exact Euclidean distance transform on anisotropic grids.

Separable lower-envelope-of-parabolas algorithm (Felzenszwalb & Huttenlocher),
one 1D pass per axis over squared distances. Squared distances are exact
whenever the squared spacings are integers.
"""

from __future__ import annotations

from typing import Sequence

import numba
import numpy as np

from ..errors import EmptyMask


@numba.njit(cache=True)
def _envelope_pass(lines, weight):
    n_lines, n = lines.shape
    out = np.empty_like(lines)
    v = np.empty(n, np.int64)
    z = np.empty(n + 1, np.float64)
    for li in range(n_lines):
        f = lines[li]
        k = -1
        for q in range(n):
            if f[q] == np.inf:
                continue
            if k < 0:
                k = 0
                v[0] = q
                z[0] = -np.inf
                z[1] = np.inf
                continue
            while True:
                p = v[k]
                s = ((f[q] + weight * q * q) - (f[p] + weight * p * p)) / (2.0 * weight * (q - p))
                if s <= z[k]:
                    k -= 1
                    if k < 0:
                        break
                else:
                    break
            k += 1
            v[k] = q
            z[k] = -np.inf if k == 0 else s
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                out[li, q] = np.inf
            continue
        j = 0
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d = q - v[j]
            out[li, q] = weight * d * d + f[v[j]]
    return out


def squared_distance_field(mask: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Squared distance (mm^2) from every voxel center to the nearest set voxel."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptyMask("distance field of an empty mask")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (mask.ndim,))
    f = np.where(mask, 0.0, np.inf)
    for axis in range(mask.ndim):
        moved = np.moveaxis(f, axis, -1)
        shape = moved.shape
        lines = np.ascontiguousarray(moved).reshape(-1, shape[-1])
        res = _envelope_pass(lines, float(spacing[axis]) ** 2)
        f = np.moveaxis(res.reshape(shape), -1, axis)
    return np.ascontiguousarray(f)


def distance_field(mask: np.ndarray, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> np.ndarray:
    """Exact Euclidean distance (mm) to the nearest set voxel."""
    return np.sqrt(squared_distance_field(mask, spacing))
