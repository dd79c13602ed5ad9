"""Class-, region- and dataset-wise macro aggregation of per-scan metric records."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from ..errors import UnknownTerminology
from ..labels import Catalog, Region

METRICS = ("dsc", "nsd")
REGION_COLUMNS = [r.value for r in Region] + ["All"]


@dataclass(frozen=True)
class MetricsRecord:
    terminology: str
    dataset: str
    scan: str
    dsc: float
    nsd: float

    def __post_init__(self):
        for name in METRICS:
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1] for {self.terminology}/{self.scan}")


@dataclass
class Cell:
    dsc: float
    nsd: float
    count: int


@dataclass
class AggregationReport:
    cells: dict[tuple[str, str], Cell] = field(default_factory=dict)  # (class, dataset), record means
    classes: dict[str, Cell] = field(default_factory=dict)
    regions: dict[str, Cell] = field(default_factory=dict)
    datasets: dict[str, Cell] = field(default_factory=dict)

    def to_dict(self) -> dict:
        def table(d):
            return {k: asdict(v) for k, v in sorted(d.items())}

        return {
            "schema_version": 1,
            "cells": [
                {"class": c, "dataset": d, **asdict(v)} for (c, d), v in sorted(self.cells.items())
            ],
            "classes": table(self.classes),
            "regions": {k: asdict(self.regions[k]) for k in REGION_COLUMNS if k in self.regions},
            "datasets": table(self.datasets),
        }


def _mean_cell(cells: list[Cell]) -> Cell:
    return Cell(
        float(np.mean([c.dsc for c in cells])),
        float(np.mean([c.nsd for c in cells])),
        sum(c.count for c in cells),
    )


def aggregate(records: Iterable[MetricsRecord], catalog: Catalog) -> AggregationReport:
    """Macro averages: per-dataset means first, then across datasets/classes/regions."""
    grouped: dict[tuple[str, str], list[MetricsRecord]] = defaultdict(list)
    for r in records:
        if r.terminology not in catalog:
            raise UnknownTerminology(r.terminology)
        grouped[(r.terminology, r.dataset)].append(r)

    report = AggregationReport()
    for key, recs in grouped.items():
        report.cells[key] = Cell(
            float(np.mean([r.dsc for r in recs])), float(np.mean([r.nsd for r in recs])), len(recs)
        )

    per_class: dict[str, list[Cell]] = defaultdict(list)
    per_dataset: dict[str, list[Cell]] = defaultdict(list)
    for (cls, ds), cell in report.cells.items():
        per_class[cls].append(cell)
        per_dataset[ds].append(cell)
    report.classes = {c: _mean_cell(v) for c, v in per_class.items()}
    report.datasets = {d: _mean_cell(v) for d, v in per_dataset.items()}

    per_region: dict[str, list[Cell]] = defaultdict(list)
    for cls, cell in report.classes.items():
        per_region[catalog.region_of(cls).value].append(cell)
    report.regions = {r: _mean_cell(v) for r, v in per_region.items()}
    if report.classes:
        report.regions["All"] = _mean_cell(list(report.classes.values()))
    return report


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def write_records(path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")


def read_records(path) -> list[MetricsRecord]:
    with open(path) as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]


def write_report(out_dir, report: AggregationReport, extra: Mapping | None = None) -> None:
    """report.json plus CSV tables; report.csv has regions as columns."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {**report.to_dict(), **(extra or {})}
    (out_dir / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")

    cols = [c for c in REGION_COLUMNS if c in report.regions]
    with open(out_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + cols)
        for m in METRICS:
            w.writerow([m.upper()] + [f"{getattr(report.regions[c], m):.6f}" for c in cols])
        w.writerow(["count"] + [report.regions[c].count for c in cols])

    for name, table in (("classes", report.classes), ("datasets", report.datasets)):
        with open(out_dir / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([name[:-1] if name == "datasets" else "class", "DSC", "NSD", "count"])
            for k in sorted(table):
                c = table[k]
                w.writerow([k, f"{c.dsc:.6f}", f"{c.nsd:.6f}", c.count])
