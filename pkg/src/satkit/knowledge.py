"""Knowledge concepts, relation triplets and the text/visual pairs built from them."""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass
from typing import Any, Iterable, Iterator, Mapping, Optional

import numpy as np


class Source(str, enum.Enum):
    UMLS = "UMLS"
    SEARCH_ENGINE = "SearchEngine"
    CATALOG = "Catalog"


class PairKind(str, enum.Enum):
    CONCEPT_DEFINITION = "ConceptDefinition"
    HEAD_REL_TAIL = "HeadRelTail"  # (head + rel ; tail)
    HEAD_REL_TAIL_ALT = "HeadRelTailAlt"  # (head ; rel + tail)


@dataclass(frozen=True)
class Concept:
    id: str
    name: str
    definition: Optional[str] = None
    source: Source = Source.CATALOG

    def __post_init__(self):
        if not self.name.strip():
            raise ValueError(f"concept {self.id!r} has an empty name")
        object.__setattr__(self, "source", Source(self.source))


@dataclass(frozen=True)
class RelationTriplet:
    head: str
    relation: str
    tail: str

    def __post_init__(self):
        if self.head == self.tail:
            raise ValueError(f"triplet head equals tail ({self.head!r})")
        if not self.relation.strip():
            raise ValueError("triplet relation is empty")


@dataclass(frozen=True)
class TextPair:
    left: str
    right: str
    kind: PairKind

    def __post_init__(self):
        if not self.left.strip() or not self.right.strip():
            raise ValueError("text pair sides must be nonempty")
        object.__setattr__(self, "kind", PairKind(self.kind))


@dataclass(frozen=True)
class VisualConceptPair:
    volume: Any
    mask: np.ndarray
    concept_id: str


def build_text_pairs(concepts: Iterable[Concept], triplets: Iterable[RelationTriplet]) -> Iterator[TextPair]:
    """Concept-definition pairs first, then two concatenation variants per triplet."""
    concepts = list(concepts)
    names = {c.id: c.name for c in concepts}
    for c in concepts:
        if c.definition and c.definition.strip():
            yield TextPair(c.name, c.definition, PairKind.CONCEPT_DEFINITION)
    for t in triplets:
        head, tail = names[t.head], names[t.tail]
        yield TextPair(f"{head} {t.relation}", tail, PairKind.HEAD_REL_TAIL)
        yield TextPair(head, f"{t.relation} {tail}", PairKind.HEAD_REL_TAIL_ALT)


def extract_visual_pairs(
    volume: Any,
    masks: Mapping[str, np.ndarray],
    *,
    split: Optional[str] = None,
) -> Iterator[VisualConceptPair]:
    """One pair per nonempty mask. Scans whose split is given and is not Train yield nothing."""
    if split is not None and split != "Train":
        return
    for tid in sorted(masks):
        mask = np.asarray(masks[tid], dtype=bool)
        if mask.any():
            yield VisualConceptPair(volume, mask, tid)


def truncate_text(s: str, max_units: int = 256, seed=None) -> str:
    """Random contiguous window of ``max_units`` whitespace-delimited units."""
    if max_units < 1:
        raise ValueError("max_units must be >= 1")
    units = s.split()
    if len(units) <= max_units:
        return s
    rng = np.random.default_rng(seed)
    start = int(rng.integers(0, len(units) - max_units + 1))
    return " ".join(units[start : start + max_units])


# ---------------------------------------------------------------------------
# JSONL
# ---------------------------------------------------------------------------


def _write_jsonl(path, rows: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)


def write_concepts(path, concepts: Iterable[Concept]) -> None:
    _write_jsonl(path, ({**asdict(c), "source": c.source.value} for c in concepts))


def read_concepts(path) -> list[Concept]:
    return [Concept(**row) for row in _read_jsonl(path)]


def write_triplets(path, triplets: Iterable[RelationTriplet]) -> None:
    _write_jsonl(path, (asdict(t) for t in triplets))


def read_triplets(path) -> list[RelationTriplet]:
    return [RelationTriplet(**row) for row in _read_jsonl(path)]


def write_pairs(path, pairs: Iterable[TextPair]) -> None:
    _write_jsonl(path, ({"left": p.left, "right": p.right, "kind": p.kind.value} for p in pairs))


def read_pairs(path) -> list[TextPair]:
    return [TextPair(**row) for row in _read_jsonl(path)]


_WORDS = (
    "anterior posterior superior inferior medial lateral proximal distal dorsal ventral "
    "cortex membrane tissue vessel gland lobe nerve duct cavity muscle segment wall "
    "surrounds supplies drains contains adjacent connects forms lines protects"
).split()
_RELATIONS = ("part of", "adjacent to", "supplied by", "drained by", "contains")


def synthetic_knowledge(n_concepts: int = 50, n_triplets: int = 80, seed: int = 0):
    """Deterministic toy knowledge base: roughly 70% of concepts carry a definition."""
    rng = np.random.default_rng(seed)
    concepts = []
    for i in range(n_concepts):
        name = f"structure {i} " + " ".join(rng.choice(_WORDS, 2))
        definition = None
        if rng.random() < 0.7:
            definition = " ".join(rng.choice(_WORDS, int(rng.integers(5, 40))))
        concepts.append(Concept(f"c{i:03d}", name, definition, Source.CATALOG))
    triplets = []
    while len(triplets) < n_triplets:
        h, t = (int(x) for x in rng.integers(0, n_concepts, 2))
        if h != t:
            triplets.append(RelationTriplet(f"c{h:03d}", str(rng.choice(_RELATIONS)), f"c{t:03d}"))
    return concepts, triplets
