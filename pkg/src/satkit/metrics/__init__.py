"""Segmentation metrics, box-prompt baselines and report aggregation."""

from .aggregate import AggregationReport, Cell, MetricsRecord, aggregate
from .boxes import Rect, box_as_prediction, loose_box, tight_box
from .edt import distance_field, squared_distance_field
from .overlap import boundary_voxels, dsc, nsd

__all__ = [
    "AggregationReport",
    "Cell",
    "MetricsRecord",
    "Rect",
    "aggregate",
    "boundary_voxels",
    "box_as_prediction",
    "distance_field",
    "dsc",
    "loose_box",
    "nsd",
    "squared_distance_field",
    "tight_box",
]
