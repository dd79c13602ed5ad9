"""Slice-wise box prompts built from ground truth: tight, loose, and box-as-prediction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

AXIAL = 2


@dataclass(frozen=True)
class Rect:
    """Inclusive rectangle on slice ``index`` along the slicing axis."""

    index: int
    r0: int
    c0: int
    r1: int
    c1: int

    @property
    def area(self) -> int:
        return (self.r1 - self.r0 + 1) * (self.c1 - self.c0 + 1)


def _slices(mask: np.ndarray, axis: int):
    moved = np.moveaxis(np.asarray(mask, dtype=bool), axis, 0)
    for i, sl in enumerate(moved):
        yield i, sl


def tight_box(g: np.ndarray, axis: int = AXIAL) -> list[Rect]:
    """Minimal axis-aligned rectangle per foreground slice."""
    rects = []
    for i, sl in _slices(g, axis):
        rows = np.flatnonzero(sl.any(axis=1))
        if rows.size == 0:
            continue
        cols = np.flatnonzero(sl.any(axis=0))
        rects.append(Rect(i, int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])))
    return rects


def loose_box(
    rects: Iterable[Rect],
    image_shape: Sequence[int],
    max_shift_frac: float = 0.08,
    seed=None,
) -> list[Rect]:
    """Shift each corner coordinate by a uniform integer in [-floor(f*R), floor(f*R)].

    ``image_shape`` is the 2D in-slice shape (rows, cols). Results are clamped
    to the image and re-ordered so that the low corner stays low.
    """
    if not 0 <= max_shift_frac < 1:
        raise ValueError(f"max_shift_frac must lie in [0, 1), got {max_shift_frac}")
    rows, cols = int(image_shape[0]), int(image_shape[1])
    mr, mc = int(np.floor(max_shift_frac * rows)), int(np.floor(max_shift_frac * cols))
    rng = np.random.default_rng(seed)
    out = []
    for r in rects:
        dr0, dc0, dr1, dc1 = rng.integers([-mr, -mc, -mr, -mc], [mr + 1, mc + 1, mr + 1, mc + 1])
        r0 = min(max(r.r0 + int(dr0), 0), rows - 1)
        r1 = min(max(r.r1 + int(dr1), 0), rows - 1)
        c0 = min(max(r.c0 + int(dc0), 0), cols - 1)
        c1 = min(max(r.c1 + int(dc1), 0), cols - 1)
        out.append(Rect(r.index, min(r0, r1), min(c0, c1), max(r0, r1), max(c0, c1)))
    return out


def box_as_prediction(rects: Iterable[Rect], shape: Sequence[int], axis: int = AXIAL) -> np.ndarray:
    """Stack filled per-slice rectangles into a 3D mask."""
    out = np.zeros(tuple(shape), dtype=bool)
    moved = np.moveaxis(out, axis, 0)
    for r in rects:
        moved[r.index, r.r0 : r.r1 + 1, r.c0 : r.c1 + 1] = True
    return out


def slice_shape(shape: Sequence[int], axis: int = AXIAL) -> tuple[int, int]:
    rest = [s for i, s in enumerate(shape) if i != axis]
    return rest[0], rest[1]
