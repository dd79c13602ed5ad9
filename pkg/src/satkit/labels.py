"""Unified terminology catalog, dataset class maps and hierarchical merge rules."""

from __future__ import annotations

import enum
import graphlib
import json
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import CycleDetected, UnknownTerminology, UnmappedCode
from .volume import LabelVolume, Modality

SCHEMA_VERSION = 1


class Region(str, enum.Enum):
    BRAIN = "Brain"
    HEAD_NECK = "HeadNeck"
    UPPER_LIMB = "UpperLimb"
    THORAX = "Thorax"
    SPINE = "Spine"
    ABDOMEN = "Abdomen"
    LOWER_LIMB = "LowerLimb"
    PELVIS = "Pelvis"
    WHOLE_BODY = "WholeBody"
    LESION = "Lesion"


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower()).strip("_")


def term_id(name: str, modality: Modality | str) -> str:
    return f"{slugify(name)}__{Modality(modality).value.lower()}"


@dataclass(frozen=True)
class Terminology:
    id: str
    name: str
    modality: Modality
    region: Optional[Region]

    @classmethod
    def create(cls, name: str, modality, region=None) -> "Terminology":
        return cls(term_id(name, modality), name, Modality(modality), Region(region) if region else None)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "modality": self.modality.value,
            "region": self.region.value if self.region else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "Terminology":
        region = d.get("region")
        return cls(d["id"], d["name"], Modality(d["modality"]), Region(region) if region else None)


@dataclass(frozen=True)
class ClassMap:
    """Dataset-local label code -> terminology id.

    ``synonyms`` lists groups of codes that are allowed to share one term.
    """

    dataset_id: str
    entries: Mapping[int, str]
    synonyms: tuple[tuple[int, ...], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", {int(k): v for k, v in self.entries.items()})
        object.__setattr__(self, "synonyms", tuple(tuple(int(c) for c in g) for g in self.synonyms))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset_id": self.dataset_id,
            "entries": {str(k): v for k, v in sorted(self.entries.items())},
            "synonyms": [list(g) for g in self.synonyms],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ClassMap":
        return cls(d["dataset_id"], d["entries"], tuple(tuple(g) for g in d.get("synonyms", ())))

    @classmethod
    def load(cls, path) -> "ClassMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class MergeRule:
    """``parent`` = union of ``children`` (plus any existing parent mask).

    With ``require_all`` the rule fires only when every child is present;
    lesion-into-organ rules set it to False so the organ absorbs whichever
    lesions occur.
    """

    parent: str
    children: tuple[str, ...]
    require_all: bool = True

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(self.children))
        if not self.children:
            raise ValueError(f"merge rule for {self.parent!r} has no children")
        if self.parent in self.children:
            raise ValueError(f"merge rule parent {self.parent!r} listed among its children")

    def to_dict(self) -> dict:
        return {"parent": self.parent, "children": list(self.children), "require_all": self.require_all}

    @classmethod
    def from_dict(cls, d: Mapping) -> "MergeRule":
        return cls(d["parent"], tuple(d["children"]), d.get("require_all", True))


def load_rules(path) -> list[MergeRule]:
    doc = json.loads(Path(path).read_text())
    return [MergeRule.from_dict(r) for r in doc["rules"]]


def dump_rules(rules: Iterable[MergeRule]) -> dict:
    return {"schema_version": SCHEMA_VERSION, "rules": [r.to_dict() for r in rules]}


class Catalog:
    """Read-only collection of terminologies."""

    def __init__(self, terms: Iterable[Terminology]):
        self.terms: tuple[Terminology, ...] = tuple(terms)
        self._by_id = {}
        for t in self.terms:
            self._by_id.setdefault(t.id, t)

    def __len__(self) -> int:
        return len(self.terms)

    def __contains__(self, tid: str) -> bool:
        return tid in self._by_id

    def __iter__(self):
        return iter(self.terms)

    def get(self, tid: str) -> Terminology:
        try:
            return self._by_id[tid]
        except KeyError:
            raise UnknownTerminology(tid) from None

    def region_of(self, tid: str) -> Region:
        region = self.get(tid).region
        if region is None:
            raise UnknownTerminology(f"{tid} has no region")
        return region

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "terms": [t.to_dict() for t in self.terms]}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Catalog":
        return cls(Terminology.from_dict(t) for t in d["terms"])

    @classmethod
    def load(cls, path) -> "Catalog":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# default catalog: the 497-class name list with heuristic region assignment
# ---------------------------------------------------------------------------

LESION_WORDS = (
    "tumor", "cancer", "cyst", "nodule", "infection", "hemorrhage", "edema", "scar",
    "effusion", "embolism", "stroke", "hyperintensities", "schwannoma", "lesion", "metasta",
)

# structures spanning several regions
_WHOLE_BODY = {"bone", "fat", "muscle", "skin", "lymph node", "aorta", "inferior vena cava"}

# first matching word-prefix wins; order resolves overlaps (heart ventricle
# before brain ventricle, liver/lung lobes before brain lobes, hippocampus
# before hip)
_REGION_KEYWORDS = [
    (Region.ABDOMEN, ("segment of liver", "lobe of liver", "caudate lobe", "liver", "spleen", "kidney",
                      "pancrea", "stomach", "gallbladder", "duodenum", "intestine", "small bowel", "colon",
                      "adrenal", "renal", "celiac", "portal vein", "abdominal")),
    (Region.HEAD_NECK, ("eyeball", "lens", "optic nerve", "optic chiasm", "parotid", "submandibular",
                        "mandible", "cochlea", "ear", "tympanic", "mastoid", "eustachian", "auditory",
                        "lacrimal", "larynx", "arytenoid", "pharyn", "nasopharyn", "cricopharyn", "lips",
                        "buccal", "cheek", "oral", "nasal", "thyroid", "carotid", "jugular",
                        "temporomandibular", "skull", "alveolar nerve", "vestibule", "cervical esophagus",
                        "pituitary")),
    (Region.THORAX, ("lung", "heart", "atrium", "myocard", "trachea", "bronch", "pulmonary", "rib",
                     "sternum", "costal", "thymus", "breast", "mediastin", "thoracic cavity", "esophagus",
                     "superior vena cava", "brachiocephalic", "subclavian", "auricle")),
    (Region.SPINE, ("vertebra", "intervertebral", "spinal", "autochthon", "sacral", "sacrum")),
    (Region.UPPER_LIMB, ("clavicle", "scapula", "humerus")),
    (Region.BRAIN, ("brain", "hippocamp", "parahippocamp", "amygdala", "gyrus", "lobe", "cerebell",
                    "ventricle", "callosum", "thalamus", "putamen", "pallidum", "caudate nucleus",
                    "accumbens", "substantia nigra", "grey matter", "white matter", "cerebrospinal",
                    "insula", "cortex", "optic radiation", "corticospinal", "ganglia", "cuneus",
                    "subcallosal", "occipital", "parietal", "frontal")),
    (Region.PELVIS, ("bladder", "prostate", "rectum", "uter", "gonad", "hip", "iliac", "gluteus",
                     "iliopsoas", "head of")),
    (Region.LOWER_LIMB, ("femur", "tibia")),
]
_REGION_PATTERNS = [
    (region, re.compile("|".join(r"\b" + re.escape(w) for w in words))) for region, words in _REGION_KEYWORDS
]


def is_lesion_name(name: str) -> bool:
    n = name.lower()
    return any(w in n for w in LESION_WORDS)


def assign_region(name: str) -> Optional[Region]:
    n = name.lower()
    if is_lesion_name(n):
        return Region.LESION
    base = re.sub(r"^(left|right) ", "", n)
    if base in _WHOLE_BODY:
        return Region.WHOLE_BODY
    for region, pattern in _REGION_PATTERNS:
        if pattern.search(n):
            return region
    return None


def default_names() -> list[tuple[str, str]]:
    text = resources.files("satkit").joinpath("data/class_names.tsv").read_text()
    rows = []
    for line in text.splitlines():
        if line.strip():
            modality, name = line.split("\t")
            rows.append((modality, name))
    return rows


def default_catalog() -> Catalog:
    """The 497-class catalog; regions come from :func:`assign_region`."""
    return Catalog(
        Terminology.create(name, modality.upper(), assign_region(name))
        for modality, name in default_names()
    )


def default_rules() -> list[MergeRule]:
    doc = json.loads(resources.files("satkit").joinpath("data/merges.json").read_text())
    return [MergeRule.from_dict(r) for r in doc["rules"]]


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def map_labels(l: LabelVolume, m: ClassMap, catalog: Optional[Catalog] = None) -> dict[str, np.ndarray]:
    """Expand a label-coded grid into one boolean mask per terminology id."""
    masks: dict[str, np.ndarray] = {}
    for code in l.codes():
        if code not in m.entries:
            raise UnmappedCode(f"code {code} of dataset {m.dataset_id!r} has no class-map entry")
        tid = m.entries[code]
        if catalog is not None and tid not in catalog:
            raise UnknownTerminology(tid)
        hit = l.data == code
        masks[tid] = masks[tid] | hit if tid in masks else hit
    return masks


def _rule_order(rules: list[MergeRule]) -> list[MergeRule]:
    graph = defaultdict(set)
    for r in rules:
        graph[r.parent].update(r.children)
    try:
        order = list(graphlib.TopologicalSorter(graph).static_order())
    except graphlib.CycleError as exc:
        raise CycleDetected(f"merge rules form a cycle: {exc.args[1]}") from None
    rank = {tid: i for i, tid in enumerate(order)}
    return sorted(rules, key=lambda r: rank[r.parent])


def apply_merges(masks: Mapping[str, np.ndarray], rules: Iterable[MergeRule]) -> dict[str, np.ndarray]:
    """Add parent masks as unions of their children, children first."""
    out = dict(masks)
    for rule in _rule_order(list(rules)):
        present = [c for c in rule.children if c in out]
        if not present or (rule.require_all and len(present) != len(rule.children)):
            continue
        union = np.logical_or.reduce([out[c] for c in present])
        if rule.parent in out:
            union = union | out[rule.parent]
        out[rule.parent] = union
    return out


@dataclass(frozen=True)
class Finding:
    kind: str
    subject: str
    detail: str = ""


def validate_catalog(
    catalog: Catalog,
    maps: Iterable[ClassMap] = (),
    rules: Iterable[MergeRule] = (),
) -> list[Finding]:
    """Admissibility report; an empty list means the catalog is usable."""
    findings = []
    keys = Counter((t.name, t.modality) for t in catalog)
    for (name, modality), n in sorted(keys.items()):
        if n > 1:
            findings.append(Finding("duplicate", term_id(name, modality), f"{n} entries for ({name}, {modality.value})"))
    ids = Counter(t.id for t in catalog)
    for tid, n in sorted(ids.items()):
        if n > 1 and keys[(catalog.get(tid).name, catalog.get(tid).modality)] <= 1:
            findings.append(Finding("duplicate", tid, f"id shared by {n} terms"))

    for t in catalog:
        if t.region is None:
            findings.append(Finding("missing_region", t.id))
        elif is_lesion_name(t.name) and t.region is not Region.LESION:
            findings.append(Finding("lesion_in_anatomical_region", t.id, t.region.value))

    rules = list(rules)
    for r in rules:
        for ref in (r.parent, *r.children):
            if ref not in catalog:
                findings.append(Finding("dangling_reference", ref, f"merge rule for {r.parent}"))
    try:
        _rule_order(rules)
    except CycleDetected as exc:
        findings.append(Finding("cycle", "merges", str(exc)))

    for m in maps:
        for code, tid in sorted(m.entries.items()):
            if tid not in catalog:
                findings.append(Finding("dangling_reference", tid, f"{m.dataset_id} code {code}"))
        allowed = {frozenset(g) for g in m.synonyms}
        by_term = defaultdict(list)
        for code, tid in m.entries.items():
            by_term[tid].append(code)
        for tid, codes in sorted(by_term.items()):
            if len(codes) > 1 and not any(set(codes) <= g for g in allowed):
                findings.append(Finding("non_injective", tid, f"{m.dataset_id} codes {sorted(codes)}"))
    return findings
