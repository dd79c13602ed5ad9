"""Batch orchestration: harmonize, split, sample-plan, eval and report over a file store.

Store layout::

    <store>/catalog.json  harmonize.json  split.json  scans.jsonl  sample_plan.json
    <store>/<dataset>/img/<scan>.nii.gz
    <store>/<dataset>/lbl/<scan>/<term>.nii.gz
    <store>/<dataset>/sidecar/<scan>.json

Every JSON output carries ``schema_version`` and the run's ``config_hash``;
no absolute paths or timestamps are written, so repeated runs are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import nifti
from .errors import ConfigError, MissingArtifact, SatkitError
from .labels import Catalog, ClassMap, Region, Terminology, apply_merges, default_catalog, default_rules, map_labels
from .metrics import MetricsRecord, aggregate, box_as_prediction, dsc, loose_box, nsd, tight_box
from .metrics.aggregate import read_records as read_metrics
from .metrics.aggregate import write_records as write_metrics
from .metrics.aggregate import write_report
from .metrics.boxes import slice_shape
from .phantom import DatasetManifest
from .sampler import ScanRecord, build_plan, choose_patch, draw_scans, read_records, split_scans, write_records
from .volume import (
    PATCH_EXTENT,
    TARGET_SPACING,
    Modality,
    crop_nonzero,
    load_nifti,
    normalize,
    reorient,
    resample,
    spacing_of,
)

SCHEMA_VERSION = 1
BASELINES = ("ground-truth", "tight", "loose")


@dataclass(frozen=True)
class RunConfig:
    axcodes: str = "RAS"
    spacing: tuple = TARGET_SPACING
    patch_extent: tuple = PATCH_EXTENT
    seed: int = 0
    tau_mm: float = 1.0
    tau_voxels: Optional[float] = None
    oversample_prob: float = 0.5
    ratio: float = 0.8
    preview_draws: int = 16
    jobs: int = 1  # affects speed only, so it is left out of the hash

    def __post_init__(self):
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "patch_extent", tuple(int(s) for s in self.patch_extent))
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ConfigError(f"spacing must be three positive numbers, got {self.spacing}")
        if len(self.patch_extent) != 3 or min(self.patch_extent) < 1:
            raise ConfigError(f"patch_extent must be three positive integers, got {self.patch_extent}")
        if not 0 <= self.oversample_prob <= 1:
            raise ConfigError(f"oversample_prob must lie in [0, 1], got {self.oversample_prob}")
        if not 0 < self.ratio < 1:
            raise ConfigError(f"ratio must lie in (0, 1), got {self.ratio}")
        if self.tau_mm <= 0 or (self.tau_voxels is not None and self.tau_voxels <= 0):
            raise ConfigError("tolerances must be positive")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("jobs")
        d["spacing"], d["patch_extent"] = list(self.spacing), list(self.patch_extent)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def load(cls, path, **overrides) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text()) if path else {}
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        try:
            return cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _load(path: Path, command: str) -> dict:
    if not path.exists():
        raise MissingArtifact(path, command)
    return json.loads(path.read_text())


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _failure(dataset: str, scan: str, exc: BaseException) -> dict:
    return {"dataset": dataset, "scan": scan, "error": type(exc).__name__, "message": str(exc)}


# ---------------------------------------------------------------------------
# harmonize
# ---------------------------------------------------------------------------


def run_catalog(manifests: Iterable[DatasetManifest]) -> Catalog:
    """Default catalog plus any manifest-supplied terms (``region_defaults``: id -> region)."""
    terms = list(default_catalog())
    known = {t.id for t in terms}
    for m in manifests:
        for tid, region in sorted(m.region_defaults.items()):
            if tid in known:
                continue
            slug, _, modality = tid.rpartition("__")
            if not slug:
                raise ConfigError(f"{m.dataset_id}: region default {tid!r} is not a terminology id")
            try:
                terms.append(Terminology(tid, slug.replace("_", " "), Modality(modality.upper()), Region(region)))
            except ValueError as exc:
                raise ConfigError(f"{m.dataset_id}: region default {tid!r}: {exc}") from None
            known.add(tid)
    return Catalog(terms)


def _harmonize_scan(job) -> dict:
    manifest, entry, cmap, catalog, config, store = job
    ds = manifest.dataset_id
    try:
        vol, lab = load_nifti(manifest.resolve(entry.image), manifest.resolve(entry.label), manifest.modality)
        original = {"shape": list(vol.shape), "spacing": spacing_of(vol.affine).tolist(), "axcodes": vol.axcodes}
        vol, lab = reorient(vol, config.axcodes), reorient(lab, config.axcodes)
        vol, lab = resample(vol, config.spacing), resample(lab, config.spacing)
        vol, lab, offset = crop_nonzero(vol, lab)
        vol = normalize(vol)
        masks = apply_merges(map_labels(lab, cmap, catalog), list(default_rules()) + list(manifest.merges))
    except (SatkitError, ValueError, OSError) as exc:
        return {"failure": _failure(ds, entry.scan_id, exc)}

    root = store / ds
    nifti.write_nifti(root / "img" / f"{entry.scan_id}.nii.gz", vol.data, vol.affine)
    for tid in sorted(masks):
        nifti.write_nifti(root / "lbl" / entry.scan_id / f"{tid}.nii.gz", masks[tid].astype(np.uint8), vol.affine)
    fg = np.logical_or.reduce(list(masks.values())) if masks else np.zeros(vol.shape, bool)
    sidecar = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config.hash(),
        "dataset": ds,
        "scan": entry.scan_id,
        "patient_id": entry.patient_id,
        "group_id": entry.group_id,
        "modality": vol.modality.value,
        "source": {"image": entry.image, "label": entry.label, **original},
        "crop_offset": [int(o) for o in offset],
        "shape": list(vol.shape),
        "spacing": spacing_of(vol.affine).tolist(),
        "classes": sorted(masks),
        "s_roi": int(fg.sum()),
    }
    _dump(root / "sidecar" / f"{entry.scan_id}.json", sidecar)
    return {"scan": f"{ds}/{entry.scan_id}"}


def cmd_harmonize(manifest_paths: Sequence, store, config: RunConfig) -> dict:
    """Reorient, respace, crop and normalise every scan; map and merge its labels."""
    store = Path(store)
    try:
        manifests = [DatasetManifest.load(p) for p in manifest_paths]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad manifest: {exc}") from None
    ids = [m.dataset_id for m in manifests]
    if len(set(ids)) != len(ids):
        raise ConfigError(f"dataset ids must be unique per run: {ids}")
    catalog = run_catalog(manifests)
    store.mkdir(parents=True, exist_ok=True)
    catalog.save(store / "catalog.json")

    jobs, failures = [], []
    for m in manifests:
        try:
            cmap = ClassMap.load(m.resolve(m.classmap))
        except (OSError, ValueError, KeyError) as exc:
            failures.extend(_failure(m.dataset_id, e.scan_id, exc) for e in m.scans)
            continue
        jobs.extend((m, e, cmap, catalog, config, store) for e in m.scans)

    done = []
    for res in _map(_harmonize_scan, jobs, config.jobs):
        if "failure" in res:
            failures.append(res["failure"])
        else:
            done.append(res["scan"])
    summary = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "datasets": sorted(ids),
        "scans": sorted(done),
        "failures": sorted(failures, key=lambda f: (f["dataset"], f["scan"])),
    }
    _dump(store / "harmonize.json", summary)
    return summary


# ---------------------------------------------------------------------------
# split / sample plan
# ---------------------------------------------------------------------------


def _sidecars(store: Path) -> list[dict]:
    summary = _load(store / "harmonize.json", f"satkit harmonize <manifests> --store {store}")
    out = []
    for key in summary["scans"]:
        ds, scan = key.split("/", 1)
        out.append(json.loads((store / ds / "sidecar" / f"{scan}.json").read_text()))
    return out


def scan_records(store) -> list[ScanRecord]:
    return [
        ScanRecord(
            f"{s['dataset']}/{s['scan']}", s["dataset"], s["patient_id"], s["s_roi"], len(s["classes"]), s["group_id"]
        )
        for s in _sidecars(Path(store))
    ]


def cmd_split(store, config: RunConfig) -> dict:
    store = Path(store)
    records = scan_records(store)
    sides = split_scans(records, config.ratio, config.seed)
    write_records(store / "scans.jsonl", records)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config.hash(),
        "ratio": config.ratio,
        "seed": config.seed,
        "assignment": dict(sorted(sides.items())),
    }
    _dump(store / "split.json", doc)
    return doc


def _load_masks(store: Path, scan_key: str, classes: Iterable[str]) -> dict[str, np.ndarray]:
    ds, scan = scan_key.split("/", 1)
    out = {}
    for tid in classes:
        data, _, _ = nifti.read_nifti(store / ds / "lbl" / scan / f"{tid}.nii.gz")
        out[tid] = data > 0
    return out


def cmd_sample_plan(store, config: RunConfig) -> dict:
    """Sampling plan over the training split plus a short preview of patch draws."""
    store = Path(store)
    split = _load(store / "split.json", f"satkit split --store {store}")
    records = [r for r in read_records(store / "scans.jsonl") if split["assignment"][r.scan_id] == "Train"]
    plan = build_plan(records, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    classes = {f"{s['dataset']}/{s['scan']}": s["classes"] for s in _sidecars(store)}
    preview = []
    for scan in draw_scans(plan, config.preview_draws, rng):
        masks = _load_masks(store, scan, classes[scan])
        spec = choose_patch(masks, config.patch_extent, config.oversample_prob, rng) if masks else None
        preview.append({"scan": scan, "origin": list(spec.origin) if spec else None})
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config.hash(),
        "plan": plan.to_dict(),
        "probabilities": dict(zip([e[0] for e in plan.entries], plan.probabilities().tolist())),
        "patch_extent": list(config.patch_extent),
        "oversample_prob": config.oversample_prob,
        "preview": preview,
    }
    _dump(store / "sample_plan.json", doc)
    return doc


# ---------------------------------------------------------------------------
# eval / report
# ---------------------------------------------------------------------------


def _box_seed(seed: int, scan: str, tid: str) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{scan}:{tid}".encode()).digest()[:8], "little")


def _eval_scan(job) -> dict:
    store, scan_key, sidecar, mode, predictions, config = job
    ds, scan = scan_key.split("/", 1)
    spacing = tuple(sidecar["spacing"])
    records, failures = [], []
    for tid in sidecar["classes"]:
        try:
            g = _load_masks(store, scan_key, [tid])[tid]
            if predictions is not None:
                p, _, _ = nifti.read_nifti(Path(predictions) / ds / scan / f"{tid}.nii.gz")
                p = p > 0
            elif mode == "ground-truth":
                p = g
            else:
                rects = tight_box(g)
                if mode == "loose":
                    rects = loose_box(rects, slice_shape(g.shape), seed=_box_seed(config.seed, scan_key, tid))
                p = box_as_prediction(rects, g.shape)
            records.append(
                MetricsRecord(
                    tid,
                    ds,
                    scan,
                    dsc(p, g),
                    nsd(p, g, spacing, tau_mm=config.tau_mm, tau_voxels=config.tau_voxels),
                )
            )
        except (SatkitError, ValueError, OSError) as exc:
            failures.append({**_failure(ds, scan, exc), "class": tid})
    return {"records": records, "failures": failures}


def cmd_eval(store, out, config: RunConfig, baseline: str = "ground-truth", predictions=None, subset: str = "all") -> dict:
    """Score predictions from disk, or a ground-truth/box baseline, on harmonized scans."""
    store, out = Path(store), Path(out)
    if predictions is None and baseline not in BASELINES:
        raise ConfigError(f"baseline must be one of {BASELINES}, got {baseline!r}")
    sidecars = {f"{s['dataset']}/{s['scan']}": s for s in _sidecars(store)}
    if subset != "all":
        split = _load(store / "split.json", f"satkit split --store {store}")
        sidecars = {k: v for k, v in sidecars.items() if split["assignment"].get(k) == subset}
    jobs = [(store, k, sidecars[k], baseline, predictions, config) for k in sorted(sidecars)]
    records, failures = [], []
    for res in _map(_eval_scan, jobs, config.jobs):
        records.extend(res["records"])
        failures.extend(res["failures"])
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(out / "records.jsonl", records)
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config.hash(),
        "source": "predictions" if predictions is not None else baseline,
        "subset": subset,
        "tau": {"voxels": config.tau_voxels} if config.tau_voxels is not None else {"mm": config.tau_mm},
        "records": len(records),
        "failures": failures,
    }
    _dump(out / "eval.json", doc)
    return doc


def cmd_report(store, eval_dir, out, config: RunConfig):
    store, eval_dir = Path(store), Path(eval_dir)
    path = eval_dir / "records.jsonl"
    if not path.exists():
        raise MissingArtifact(path, f"satkit eval --store {store} --out {eval_dir}")
    catalog_path = store / "catalog.json"
    if not catalog_path.exists():
        raise MissingArtifact(catalog_path, f"satkit harmonize <manifests> --store {store}")
    report = aggregate(read_metrics(path), Catalog.load(catalog_path))
    write_report(out, report, extra={"config_hash": config.hash()})
    return report
