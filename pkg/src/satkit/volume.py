"""3D volumes and the preprocessing chain: reorient, respace, crop, normalize."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Union

import numpy as np

from . import nifti
from .errors import (
    AllZeroVolume,
    DegenerateOutput,
    InvalidAxcodes,
    ShapeMismatch,
    SingularAffine,
)

PATCH_EXTENT = (288, 288, 96)
TARGET_SPACING = (1.0, 1.0, 3.0)
CT_WINDOW = (-500.0, 1000.0)
MR_PERCENTILES = (0.5, 99.5)

_AXIS_PAIRS = (("L", "R"), ("P", "A"), ("I", "S"))


class Modality(str, enum.Enum):
    CT = "CT"
    MRI = "MRI"
    PET = "PET"


def spacing_of(affine: np.ndarray) -> np.ndarray:
    return np.sqrt((np.asarray(affine)[:3, :3] ** 2).sum(axis=0))


def axcodes_of(affine: np.ndarray) -> str:
    """Anatomical direction (RAS+ world) that each voxel axis points toward."""
    rot = np.asarray(affine, dtype=np.float64)[:3, :3]
    if abs(np.linalg.det(rot)) < 1e-12:
        raise SingularAffine("affine 3x3 block is singular")
    codes = []
    used = set()
    for j in range(3):
        col = rot[:, j]
        world = int(np.argmax(np.abs(col)))
        if world in used:
            raise SingularAffine("two voxel axes map to the same world axis")
        used.add(world)
        codes.append(_AXIS_PAIRS[world][1] if col[world] > 0 else _AXIS_PAIRS[world][0])
    return "".join(codes)


def _check_axcodes(codes: str) -> str:
    codes = codes.upper()
    if len(codes) != 3:
        raise InvalidAxcodes(f"axcodes must have 3 letters, got {codes!r}")
    pairs = []
    for c in codes:
        for i, pair in enumerate(_AXIS_PAIRS):
            if c in pair:
                pairs.append(i)
                break
        else:
            raise InvalidAxcodes(f"unknown axis letter {c!r} in {codes!r}")
    if sorted(pairs) != [0, 1, 2]:
        raise InvalidAxcodes(f"{codes!r} is not a permutation of L/R, P/A, I/S")
    return codes


def _check_affine(affine: np.ndarray) -> np.ndarray:
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {affine.shape}")
    if not np.array_equal(affine[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("affine last row must be (0, 0, 0, 1)")
    return affine


@dataclass(frozen=True, eq=False)
class Volume:
    """Single-channel scan: float64 intensities on a grid with a voxel-to-world affine."""

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    modality: Modality = Modality.CT

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with every extent >= 1, got {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", _check_affine(self.affine))
        object.__setattr__(self, "modality", Modality(self.modality))
        if np.any(self.spacing <= 0):
            raise SingularAffine(f"non-positive spacing {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing(self) -> np.ndarray:
        return spacing_of(self.affine)

    @property
    def axcodes(self) -> str:
        return axcodes_of(self.affine)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer-coded annotation grid. Code 0 is background."""

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    code_map: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"label data must be 3D with every extent >= 1, got {data.shape}")
        if data.dtype != np.uint16:
            if np.any(data < 0) or np.any(data > np.iinfo(np.uint16).max) or np.any(data != np.round(data)):
                raise ValueError("label codes must be integers in [0, 65535]")
            data = data.astype(np.uint16)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "affine", _check_affine(self.affine))
        object.__setattr__(self, "code_map", {int(k): v for k, v in self.code_map.items()})

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def spacing(self) -> np.ndarray:
        return spacing_of(self.affine)

    def codes(self) -> list[int]:
        return [int(c) for c in np.unique(self.data) if c != 0]


Grid = Union[Volume, LabelVolume]


@dataclass(frozen=True)
class PatchSpec:
    origin: tuple[int, int, int] = (0, 0, 0)
    extent: tuple[int, int, int] = PATCH_EXTENT

    def __post_init__(self):
        if any(o < 0 for o in self.origin):
            raise ValueError(f"patch origin must be non-negative, got {self.origin}")
        if any(e < 1 for e in self.extent):
            raise ValueError(f"patch extent must be positive, got {self.extent}")

    def padded_shape(self, shape: Sequence[int]) -> tuple[int, ...]:
        return tuple(max(s, e) for s, e in zip(shape, self.extent))

    def fits(self, shape: Sequence[int]) -> bool:
        return all(o + e <= p for o, e, p in zip(self.origin, self.extent, self.padded_shape(shape)))


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def load_nifti(
    path,
    label_path=None,
    modality: Modality | str = Modality.CT,
    code_map: Optional[dict] = None,
) -> tuple[Volume, Optional[LabelVolume]]:
    data, affine, _ = nifti.read_nifti(path)
    vol = Volume(data, affine, Modality(modality))
    label = None
    if label_path is not None:
        lab, lab_affine, _ = nifti.read_nifti(label_path)
        if lab.shape != vol.shape:
            raise ShapeMismatch(f"label grid {lab.shape} != image grid {vol.shape}")
        label = LabelVolume(lab, lab_affine, code_map or {})
    return vol, label


def save_nifti(path, grid: Grid) -> None:
    if isinstance(grid, LabelVolume):
        nifti.write_nifti(path, grid.data.astype(np.uint16), grid.affine)
    else:
        nifti.write_nifti(path, grid.data.astype(np.float64), grid.affine)


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------


def reorient(v: Grid, target_axcodes: str = "RAS") -> Grid:
    """Permute and flip voxel axes so they point along ``target_axcodes``.

    No interpolation: every voxel keeps its value and world position.
    """
    target = _check_axcodes(target_axcodes)
    current = axcodes_of(v.affine)
    if current == target:
        return v

    perm, flips = [], []
    for t in target:
        pair = next(p for p in _AXIS_PAIRS if t in p)
        j = next(i for i, c in enumerate(current) if c in pair)
        perm.append(j)
        flips.append(current[j] != t)

    data = np.transpose(v.data, perm)
    transform = np.zeros((4, 4))
    transform[3, 3] = 1.0
    for k, (j, flip) in enumerate(zip(perm, flips)):
        if flip:
            data = np.flip(data, axis=k)
            transform[j, k] = -1.0
            transform[j, 3] = v.shape[j] - 1
        else:
            transform[j, k] = 1.0
    return replace(v, data=np.ascontiguousarray(data), affine=v.affine @ transform)


def _linear_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    if n == 1:
        return np.repeat(arr, len(coords), axis=axis)
    c = np.clip(coords, 0.0, n - 1)
    lo = np.minimum(np.floor(c).astype(np.intp), n - 2)
    frac = c - lo
    shape = [1, 1, 1]
    shape[axis] = len(coords)
    frac = frac.reshape(shape)
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, lo + 1, axis=axis)
    # clip keeps rounding from stepping outside the segment [a, b]
    return np.clip(a + frac * (b - a), np.minimum(a, b), np.maximum(a, b))


def _nearest_axis(arr: np.ndarray, axis: int, coords: np.ndarray) -> np.ndarray:
    n = arr.shape[axis]
    idx = np.clip(np.floor(coords + 0.5).astype(np.intp), 0, n - 1)
    return np.take(arr, idx, axis=axis)


def resample(v: Grid, target_spacing: Sequence[float] = TARGET_SPACING) -> Grid:
    """Respace to ``target_spacing`` (mm).

    Volumes are interpolated trilinearly, label volumes by nearest neighbour.
    Voxel 0 keeps its world position; the output grid is
    ``ceil(shape * spacing / target_spacing)`` so the world extent is never cut.
    """
    target = np.asarray(target_spacing, dtype=np.float64)
    if target.shape != (3,) or np.any(target <= 0):
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    spacing = v.spacing
    scale = target / spacing
    out_shape = tuple(
        int(math.ceil(n * s / t - 1e-9)) for n, s, t in zip(v.shape, spacing, target)
    )
    if min(out_shape) < 1:
        raise DegenerateOutput(f"resampled grid would be {out_shape}")

    interp = _nearest_axis if isinstance(v, LabelVolume) else _linear_axis
    data = v.data.astype(np.float64) if isinstance(v, Volume) else v.data
    for axis in range(3):
        if out_shape[axis] == v.shape[axis] and scale[axis] == 1.0:
            continue
        coords = np.arange(out_shape[axis], dtype=np.float64) * scale[axis]
        data = interp(data, axis, coords)

    affine = v.affine.copy()
    affine[:3, :3] = affine[:3, :3] * scale
    return replace(v, data=data, affine=affine)


def _shift_affine(affine: np.ndarray, offset: Sequence[int]) -> np.ndarray:
    out = affine.copy()
    out[:3, 3] = affine[:3, 3] + affine[:3, :3] @ np.asarray(offset, dtype=np.float64)
    return out


def nonzero_bbox(data: np.ndarray) -> tuple[tuple[int, int, int], tuple[int, int, int]]:
    """Inclusive-exclusive bounding box ``(lo, hi)`` of voxels with |x| > 0."""
    nz = data != 0
    if not nz.any():
        raise AllZeroVolume("volume has no nonzero voxel")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(nz.any(axis=other))
        lo.append(int(hit[0]))
        hi.append(int(hit[-1]) + 1)
    return tuple(lo), tuple(hi)


def crop_nonzero(
    v: Volume, l: Optional[LabelVolume] = None
) -> tuple[Volume, Optional[LabelVolume], tuple[int, int, int]]:
    """Crop to the tight box of nonzero raw intensities; the label follows."""
    if l is not None and l.shape != v.shape:
        raise ShapeMismatch(f"label grid {l.shape} != image grid {v.shape}")
    lo, hi = nonzero_bbox(v.data)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    vc = replace(v, data=v.data[sl].copy(), affine=_shift_affine(v.affine, lo))
    lc = None
    if l is not None:
        lc = replace(l, data=l.data[sl].copy(), affine=_shift_affine(l.affine, lo))
    return vc, lc, lo


def _zscore(x: np.ndarray) -> np.ndarray:
    mean = x.mean()
    std = x.std()
    if std == 0 or not np.isfinite(std):
        return np.zeros_like(x)
    out = (x - mean) / std
    # second pass removes residual rounding in mean and scale
    out = out - out.mean()
    s = out.std()
    return out / s if s > 0 else np.zeros_like(x)


def intensity_bounds(v: Volume) -> tuple[float, float]:
    if v.modality is Modality.CT:
        return CT_WINDOW
    lo, hi = np.percentile(v.data, MR_PERCENTILES)
    return float(lo), float(hi)


def normalize(v: Volume) -> Volume:
    """Clamp (CT window, or MRI/PET 0.5-99.5 percentiles) then z-score.

    Uses the population standard deviation; a constant volume maps to zeros.
    """
    lo, hi = intensity_bounds(v)
    clamped = np.clip(v.data, lo, hi)
    return replace(v, data=_zscore(clamped))


def crop_patch(
    v: Volume, l: Optional[LabelVolume], spec: PatchSpec
) -> tuple[Volume, Optional[LabelVolume]]:
    """Extract ``spec`` from the volume, zero-padding grids smaller than the patch."""
    if l is not None and l.shape != v.shape:
        raise ShapeMismatch(f"label grid {l.shape} != image grid {v.shape}")
    if not spec.fits(v.shape):
        raise ValueError(f"patch {spec} does not fit padded grid {spec.padded_shape(v.shape)}")

    def cut(arr):
        padded = np.zeros(spec.padded_shape(arr.shape), dtype=arr.dtype)
        padded[: arr.shape[0], : arr.shape[1], : arr.shape[2]] = arr
        sl = tuple(slice(o, o + e) for o, e in zip(spec.origin, spec.extent))
        return padded[sl].copy()

    vp = replace(v, data=cut(v.data), affine=_shift_affine(v.affine, spec.origin))
    lp = None
    if l is not None:
        lp = replace(l, data=cut(l.data), affine=_shift_affine(l.affine, spec.origin))
    return vp, lp
