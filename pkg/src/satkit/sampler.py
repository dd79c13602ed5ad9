"""Dataset/scan balancing, foreground-weighted patch selection and leakage-safe splits."""

from __future__ import annotations

import json
import math
import warnings
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .errors import EmptyDataset, NoForeground
from .volume import PATCH_EXTENT, LabelVolume, PatchSpec

PATCH_VOXELS = PATCH_EXTENT[0] * PATCH_EXTENT[1] * PATCH_EXTENT[2]
PROMPT_CAP = 32
TRAIN, TEST = "Train", "Test"


@dataclass(frozen=True)
class ScanRecord:
    scan_id: str
    dataset_id: str
    patient_id: str
    s_roi: int = 0
    n_classes: int = 0
    group_id: Optional[str] = None

    def __post_init__(self):
        if not self.patient_id:
            raise ValueError(f"scan {self.scan_id!r} has no patient id")
        if self.s_roi < 0 or self.n_classes < 0:
            raise ValueError(f"scan {self.scan_id!r}: negative s_roi or class count")


@dataclass
class SamplePlan:
    entries: list[tuple[str, float, int]]
    seed: int = 0

    def __post_init__(self):
        if any(w < 0 for _, w, _ in self.entries) or any(r < 1 for _, _, r in self.entries):
            raise ValueError("plan weights must be >= 0 and repeats >= 1")
        if not self.entries or sum(w for _, w, _ in self.entries) <= 0:
            raise ValueError("plan weights must sum to a positive value")

    def probabilities(self) -> np.ndarray:
        mass = np.array([w * r for _, w, r in self.entries], dtype=np.float64)
        return mass / mass.sum()

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "seed": self.seed,
            "entries": [{"scan_id": s, "weight": w, "repeats": r} for s, w, r in self.entries],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SamplePlan":
        return cls([(e["scan_id"], e["weight"], e["repeats"]) for e in d["entries"]], d.get("seed", 0))


def dataset_weights(case_counts: Mapping[str, int]) -> dict[str, float]:
    """Weights proportional to 1/sqrt(N), normalised to sum to one."""
    if not case_counts:
        raise EmptyDataset("no datasets given")
    for d, n in case_counts.items():
        if n < 1:
            raise EmptyDataset(f"dataset {d!r} has {n} cases")
    raw = {d: 1.0 / math.sqrt(n) for d, n in case_counts.items()}
    total = sum(raw.values())
    return {d: w / total for d, w in raw.items()}


def repeat_factor(rec: ScanRecord, patch_voxels: int = PATCH_VOXELS, prompt_cap: int = PROMPT_CAP) -> int:
    """R = (S_roi / patch_voxels) * (M / prompt_cap), rounded half-up, at least 1."""
    if patch_voxels <= 0 or prompt_cap <= 0:
        raise ValueError("patch_voxels and prompt_cap must be positive")
    r = (rec.s_roi / patch_voxels) * (rec.n_classes / prompt_cap)
    return max(1, math.floor(r + 0.5))


def build_plan(
    records: Sequence[ScanRecord],
    seed: int = 0,
    patch_voxels: int = PATCH_VOXELS,
    prompt_cap: int = PROMPT_CAP,
) -> SamplePlan:
    counts: dict[str, int] = defaultdict(int)
    for r in records:
        counts[r.dataset_id] += 1
    dw = dataset_weights(counts)
    entries = [
        (r.scan_id, dw[r.dataset_id] / counts[r.dataset_id], repeat_factor(r, patch_voxels, prompt_cap))
        for r in records
    ]
    return SamplePlan(entries, seed)


def draw_scan(plan: SamplePlan, rng: np.random.Generator) -> str:
    """One draw with probability proportional to weight * repeats."""
    cdf = np.cumsum(plan.probabilities())
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return plan.entries[min(i, len(cdf) - 1)][0]


def draw_scans(plan: SamplePlan, n: int, rng: Optional[np.random.Generator] = None) -> list[str]:
    rng = rng if rng is not None else np.random.default_rng(plan.seed)
    cdf = np.cumsum(plan.probabilities())
    idx = np.searchsorted(cdf, rng.random(n) * cdf[-1], side="right")
    idx = np.minimum(idx, len(cdf) - 1)
    return [plan.entries[i][0] for i in idx]


# ---------------------------------------------------------------------------
# patch choice
# ---------------------------------------------------------------------------

Labels = Union[LabelVolume, np.ndarray, Mapping[str, np.ndarray]]


def class_count_map(labels: Labels) -> np.ndarray:
    """Number of classes covering each voxel.

    Accepts a label-coded volume (at most one class per voxel), a boolean
    stack of shape (M, H, W, D), or a mapping of per-class masks.
    """
    if isinstance(labels, LabelVolume):
        return (labels.data != 0).astype(np.int64)
    if isinstance(labels, Mapping):
        masks = list(labels.values())
        if not masks:
            raise ValueError("empty mask mapping")
        return np.sum([np.asarray(m, bool) for m in masks], axis=0, dtype=np.int64)
    arr = np.asarray(labels)
    if arr.ndim == 4:
        return arr.astype(bool).sum(axis=0, dtype=np.int64)
    return (arr != 0).astype(np.int64)


def _block_class_counts(labels: Labels, downsample: int) -> tuple[np.ndarray, np.ndarray]:
    """Distinct classes per ``downsample``-cube block, plus the voxel-level foreground."""
    if isinstance(labels, LabelVolume):
        stack = [labels.data == c for c in labels.codes()]
        shape = labels.shape
    elif isinstance(labels, Mapping):
        stack = [np.asarray(m, bool) for m in labels.values()]
        shape = stack[0].shape
    else:
        arr = np.asarray(labels)
        if arr.ndim == 4:
            stack = list(arr.astype(bool))
            shape = arr.shape[1:]
        else:
            stack = [arr == c for c in np.unique(arr) if c != 0]
            shape = arr.shape
    fg = np.zeros(shape, bool)
    bshape = tuple(-(-s // downsample) for s in shape)
    counts = np.zeros(bshape, np.int64)
    pad = [(0, b * downsample - s) for b, s in zip(bshape, shape)]
    for m in stack:
        fg |= m
        blocks = np.pad(m, pad).reshape(bshape[0], downsample, bshape[1], downsample, bshape[2], downsample)
        counts += blocks.any(axis=(1, 3, 5))
    return counts, fg


class ForegroundSampler:
    """Draws foreground anchors; each block is weighted by its distinct-class count."""

    def __init__(self, labels: Labels, downsample: int = 3):
        self.downsample = downsample
        self.counts, self.fg = _block_class_counts(labels, downsample)
        self.total = int(self.counts.sum())
        self._cdf = np.cumsum(self.counts.ravel().astype(np.float64))

    def draw(self, rng: np.random.Generator) -> Optional[tuple[int, int, int]]:
        if self.total == 0:
            return None
        b = int(np.searchsorted(self._cdf, rng.random() * self.total, side="right"))
        b = min(b, self._cdf.size - 1)
        block = np.unravel_index(b, self.counts.shape)
        sl = tuple(slice(i * self.downsample, (i + 1) * self.downsample) for i in block)
        local = np.argwhere(self.fg[sl])
        pick = local[int(rng.integers(len(local)))]
        return tuple(int(p + s.start) for p, s in zip(pick, sl))


def foreground_anchor(labels: Labels, rng: np.random.Generator, downsample: int = 3) -> Optional[tuple[int, int, int]]:
    """Pick a foreground voxel, or None when there is none."""
    return ForegroundSampler(labels, downsample).draw(rng)


def choose_patch(
    labels: Labels,
    extent: Sequence[int] = PATCH_EXTENT,
    oversample_prob: float = 0.5,
    rng: Optional[np.random.Generator] = None,
    downsample: int = 3,
) -> PatchSpec:
    """Patch origin: foreground-anchored with ``oversample_prob``, else uniform."""
    rng = rng if rng is not None else np.random.default_rng()
    extent = tuple(int(e) for e in extent)
    if any(e < 1 for e in extent):
        raise ValueError(f"extent must be positive, got {extent}")
    shape = labels.shape if isinstance(labels, LabelVolume) else class_count_map(labels).shape
    padded = tuple(max(s, e) for s, e in zip(shape, extent))

    anchor = None
    if rng.random() < oversample_prob:
        anchor = foreground_anchor(labels, rng, downsample)
        if anchor is None:
            warnings.warn("oversampling requested on an empty label volume; using a uniform patch", NoForeground)
    if anchor is None:
        origin = tuple(int(rng.integers(0, p - e + 1)) for p, e in zip(padded, extent))
    else:
        origin = tuple(
            int(rng.integers(max(0, a - e + 1), min(a, p - e) + 1)) for a, e, p in zip(anchor, extent, padded)
        )
    return PatchSpec(origin, extent)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def split_scans(records: Sequence[ScanRecord], ratio: float = 0.8, seed: int = 0) -> dict[str, str]:
    """Per-dataset train/test split at patient granularity.

    Scans of one patient, and scans sharing a ``group_id`` (possibly across
    datasets), always land on the same side.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    uf = _UnionFind()
    for r in records:
        uf.union(("scan", r.scan_id), ("patient", r.dataset_id, r.patient_id))
        if r.group_id:
            uf.union(("scan", r.scan_id), ("group", r.group_id))

    component = {r.scan_id: uf.find(("scan", r.scan_id)) for r in records}
    members: dict = defaultdict(list)
    for r in records:
        members[component[r.scan_id]].append(r)

    by_dataset: dict[str, list[ScanRecord]] = defaultdict(list)
    for r in records:
        by_dataset[r.dataset_id].append(r)

    rng = np.random.default_rng(seed)
    side: dict = {}
    for dataset in sorted(by_dataset):
        recs = by_dataset[dataset]
        target = math.floor(ratio * len(recs) + 0.5)
        units: dict = defaultdict(int)
        for r in recs:
            units[component[r.scan_id]] += 1
        train = sum(n for c, n in units.items() if side.get(c) == TRAIN)
        free = sorted((c for c in units if c not in side), key=repr)
        for i in rng.permutation(len(free)):
            c = free[int(i)]
            n = units[c]
            side[c] = TRAIN if abs(train + n - target) < abs(train - target) else TEST
            if side[c] == TRAIN:
                train += n
    return {r.scan_id: side[component[r.scan_id]] for r in records}


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def read_records(path) -> list[ScanRecord]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(ScanRecord(**json.loads(line)))
    return out


def write_records(path, records: Iterable[ScanRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
