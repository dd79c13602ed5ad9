"""Seeded geometric phantoms with analytic masks, written as NIfTI datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import nifti
from .labels import ClassMap, MergeRule

# structure -> terminology id; the kidney shell absorbs its tumour core on merge
PHANTOM_CLASSES = {
    "sphere": "liver__ct",
    "box": "spleen__ct",
    "lshape": "pancreas__ct",
    "shell": "kidney__ct",
    "core": "kidney_tumor__ct",
}
PHANTOM_RULES = (MergeRule("kidney__ct", ("kidney_tumor__ct",), require_all=False),)
_INTENSITY = {"body": -60.0, "sphere": 60.0, "box": 45.0, "lshape": 35.0, "shell": 150.0, "core": 90.0}
_DIRECTIONS = {"R": 1, "L": -1, "A": 1, "P": -1, "S": 1, "I": -1}


@dataclass(frozen=True)
class PhantomSpec:
    dataset_id: str
    n_scans: int = 4
    shape: tuple[int, int, int] = (48, 48, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    axcodes: str = "RAS"
    n_patients: Optional[int] = None  # scans are dealt to patients round-robin
    groups: int = 0  # number of scan pairs sharing a group id
    code_offset: int = 0
    seed: int = 0

    def __post_init__(self):
        if any(s > 64 or s < 12 for s in self.shape):
            raise ValueError(f"phantom extents must lie in [12, 64], got {self.shape}")
        if self.n_scans < 1:
            raise ValueError("need at least one scan")


@dataclass
class ScanEntry:
    scan_id: str
    image: str
    label: str
    patient_id: str
    group_id: Optional[str] = None


@dataclass
class DatasetManifest:
    dataset_id: str
    modality: str
    scans: list
    classmap: str = "classmap.json"
    merges: list = field(default_factory=list)
    region_defaults: dict = field(default_factory=dict)
    root: Optional[Path] = None  # directory that relative paths resolve against

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "dataset_id": self.dataset_id,
            "modality": self.modality,
            "classmap": self.classmap,
            "merges": [r.to_dict() for r in self.merges],
            "region_defaults": dict(sorted(self.region_defaults.items())),
            "scans": [vars(s) for s in self.scans],
        }

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = json.loads(path.read_text())
        for key in ("dataset_id", "modality", "scans"):
            if key not in d:
                raise ValueError(f"{path}: manifest lacks {key!r}")
        return cls(
            d["dataset_id"],
            d["modality"],
            [ScanEntry(**s) for s in d["scans"]],
            d.get("classmap", "classmap.json"),
            [MergeRule.from_dict(r) for r in d.get("merges", [])],
            dict(d.get("region_defaults", {})),
            path.parent,
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")

    def resolve(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


def affine_for(spacing: Sequence[float], axcodes: str, shape: Sequence[int]) -> np.ndarray:
    """Axis-aligned affine whose voxel axes point along ``axcodes``, centred on the world origin."""
    aff = np.zeros((4, 4))
    aff[3, 3] = 1.0
    for i, code in enumerate(axcodes):
        world = "RAS".index(code) if code in "RAS" else "LPI".index(code)
        sign = _DIRECTIONS[code]
        aff[world, i] = sign * spacing[i]
        aff[world, 3] = -sign * spacing[i] * (shape[i] - 1) / 2
    return aff


def ball(shape, center, radius_mm, spacing) -> np.ndarray:
    idx = np.indices(shape, dtype=np.float64)
    d2 = sum(((idx[a] - center[a]) * spacing[a]) ** 2 for a in range(3))
    return d2 <= radius_mm**2


def box(shape, lo, hi) -> np.ndarray:
    m = np.zeros(shape, bool)
    m[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = True
    return m


def lshape(shape, corner, arm, width, z_range) -> np.ndarray:
    """Prism along axis 2 whose in-slice section is an L (vertical bar plus foot)."""
    r, c = corner
    m = np.zeros(shape, bool)
    m[r : r + arm, c : c + width, z_range[0] : z_range[1]] = True
    m[r + arm - width : r + arm, c : c + arm, z_range[0] : z_range[1]] = True
    return m


def structures(shape, spacing, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Disjoint masks, one per quadrant of the in-slice plane; shell and core are concentric."""
    h, w, d = shape
    qh, qw = h // 2, w // 2
    zc = (d - 1) / 2
    mm = min(qh * spacing[0], qw * spacing[1])

    def centre(r0, c0):
        jitter = rng.uniform(-1.0, 1.0, 2)
        return (r0 + (qh - 1) / 2 + jitter[0], c0 + (qw - 1) / 2 + jitter[1], zc + rng.uniform(-0.5, 0.5))

    out = {}
    r = rng.uniform(0.25, 0.32) * mm
    out["sphere"] = ball(shape, centre(0, 0), r, spacing)

    bh, bw = int(rng.integers(qh // 3, qh // 2)), int(rng.integers(qw // 3, qw // 2))
    bd = max(2, d // 3)
    lo = (int(rng.integers(2, qh - bh - 1)), qw + int(rng.integers(1, qw - bw - 1)), (d - bd) // 2)
    out["box"] = box(shape, lo, (lo[0] + bh, lo[1] + bw, lo[2] + bd))

    arm, width = int(rng.integers(qh // 2, qh - 5)), int(rng.integers(2, 4))
    zr = ((d - bd) // 2, (d - bd) // 2 + bd)
    out["lshape"] = lshape(shape, (qh + 2, int(rng.integers(2, qw - arm))), arm, width, zr)

    c = centre(qh, qw)
    outer = rng.uniform(0.28, 0.34) * mm
    inner = outer * rng.uniform(0.4, 0.6)
    core = ball(shape, c, inner, spacing)
    out["shell"] = ball(shape, c, outer, spacing) & ~core
    out["core"] = core
    return out


def _scan_rng(spec: PhantomSpec, i: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, i, sum(map(ord, spec.dataset_id))])


def render_scan(spec: PhantomSpec, i: int) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Image, label codes and analytic masks (in voxel order) for scan ``i``."""
    rng = _scan_rng(spec, i)
    masks = structures(spec.shape, spec.spacing, rng)
    img = np.zeros(spec.shape)
    img[2:-2, 2:-2, 1:-1] = _INTENSITY["body"]
    lab = np.zeros(spec.shape, np.uint16)
    for k, (name, m) in enumerate(masks.items(), start=1):
        img[m] = _INTENSITY[name]
        lab[m] = spec.code_offset + k
    body = img != 0
    img[body] += np.round(rng.normal(0.0, 4.0, int(body.sum())))
    img[body & (img == 0)] = 1.0  # keep the body strictly nonzero
    return img, lab, masks


def code_map(spec: PhantomSpec) -> dict[int, str]:
    return {spec.code_offset + k: PHANTOM_CLASSES[n] for k, n in enumerate(PHANTOM_CLASSES, start=1)}


def synth_phantom(out_dir, spec: PhantomSpec) -> DatasetManifest:
    """Write ``spec.n_scans`` scans plus classmap.json and manifest.json under ``out_dir``."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    aff = affine_for(spec.spacing, spec.axcodes, spec.shape)
    n_pat = spec.n_patients or spec.n_scans
    scans = []
    for i in range(spec.n_scans):
        img, lab, _ = render_scan(spec, i)
        sid = f"{spec.dataset_id}_{i:03d}"
        nifti.write_nifti(root / "images" / f"{sid}.nii.gz", img, aff)
        nifti.write_nifti(root / "labels" / f"{sid}.nii.gz", lab, aff)
        group = f"{spec.dataset_id}_g{i // 2}" if i // 2 < spec.groups else None
        scans.append(
            ScanEntry(sid, f"images/{sid}.nii.gz", f"labels/{sid}.nii.gz", f"{spec.dataset_id}_p{i % n_pat}", group)
        )
    cmap = ClassMap(spec.dataset_id, code_map(spec))
    (root / "classmap.json").write_text(json.dumps(cmap.to_dict(), indent=1, sort_keys=True) + "\n")
    manifest = DatasetManifest(spec.dataset_id, "CT", scans, "classmap.json", list(PHANTOM_RULES), {}, root)
    manifest.save(root / "manifest.json")
    return manifest


def default_corpus(seed: int = 0) -> list[PhantomSpec]:
    """Three small CT datasets, 12 scans in total, covering reorientation and respacing."""
    return [
        PhantomSpec("phantom_a", 4, (48, 48, 16), (1.0, 1.0, 3.0), "RAS", seed=seed),
        PhantomSpec("phantom_b", 4, (40, 40, 20), (1.25, 1.25, 2.5), "LPS", n_patients=2, code_offset=10, seed=seed),
        PhantomSpec("phantom_c", 4, (44, 40, 16), (1.0, 1.25, 3.0), "RAS", groups=1, code_offset=20, seed=seed),
    ]


def write_corpus(out_dir, specs: Sequence[PhantomSpec]) -> list[Path]:
    paths = []
    for spec in specs:
        synth_phantom(Path(out_dir) / spec.dataset_id, spec)
        paths.append(Path(out_dir) / spec.dataset_id / "manifest.json")
    return paths
