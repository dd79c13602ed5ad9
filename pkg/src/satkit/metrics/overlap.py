"""Dice similarity coefficient and normalized surface distance."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ShapeMismatch
from .edt import squared_distance_field


def _check_pair(p: np.ndarray, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(p, dtype=bool)
    g = np.asarray(g, dtype=bool)
    if p.shape != g.shape:
        raise ShapeMismatch(f"prediction {p.shape} vs ground truth {g.shape}")
    return p, g


def dsc(p: np.ndarray, g: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); two empty masks score 1."""
    p, g = _check_pair(p, g)
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, g).sum()) / denom


def boundary_voxels(m: np.ndarray) -> np.ndarray:
    """Set voxels with at least one 6-neighbour outside the mask (grid border counts as outside)."""
    m = np.asarray(m, dtype=bool)
    padded = np.pad(m, 1, constant_values=False)
    interior = m.copy()
    core = tuple(slice(1, -1) for _ in range(m.ndim))
    for axis in range(m.ndim):
        for step in (-1, 1):
            interior &= np.roll(padded, step, axis=axis)[core]
    return m & ~interior


def _union_bbox(a: np.ndarray, b: np.ndarray) -> tuple[slice, ...]:
    both = a | b
    sl = []
    for axis in range(both.ndim):
        other = tuple(i for i in range(both.ndim) if i != axis)
        hit = np.flatnonzero(both.any(axis=other))
        sl.append(slice(int(hit[0]), int(hit[-1]) + 1))
    return tuple(sl)


def nsd(
    p: np.ndarray,
    g: np.ndarray,
    spacing: Sequence[float] = (1.0, 1.0, 1.0),
    tau_mm: float = 1.0,
    tau_voxels: Optional[float] = None,
) -> float:
    """Fraction of boundary voxels lying within ``tau`` of the other mask's boundary.

    ``tau_voxels`` switches to isotropic voxel units and overrides ``tau_mm``.
    Two empty masks score 1; exactly one empty scores 0.
    """
    p, g = _check_pair(p, g)
    if tau_voxels is not None:
        spacing, tau = (1.0,) * p.ndim, float(tau_voxels)
    else:
        tau = float(tau_mm)
    p_any, g_any = p.any(), g.any()
    if not p_any and not g_any:
        return 1.0
    if not p_any or not g_any:
        return 0.0

    bp = boundary_voxels(p)
    bg = boundary_voxels(g)
    # every query and source voxel lies inside the joint bounding box
    box = _union_bbox(bp, bg)
    bp, bg = bp[box], bg[box]
    tau2 = tau * tau
    d_to_g = squared_distance_field(bg, spacing)
    d_to_p = squared_distance_field(bp, spacing)
    hit = int((d_to_g[bp] <= tau2).sum()) + int((d_to_p[bg] <= tau2).sum())
    return hit / (int(bp.sum()) + int(bg.sum()))
