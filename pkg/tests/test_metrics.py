import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from satkit.errors import EmptyMask, ShapeMismatch, UnknownTerminology
from satkit.labels import Catalog, Terminology
from satkit.metrics import (
    MetricsRecord,
    Rect,
    aggregate,
    boundary_voxels,
    box_as_prediction,
    distance_field,
    dsc,
    loose_box,
    nsd,
    squared_distance_field,
    tight_box,
)
from satkit.metrics.aggregate import read_records, write_records, write_report

from oracles import all_pairs_sq, brute_boundary, brute_dsc, brute_nsd, perturbed, random_blob

SPACINGS = [(1.0, 1.0, 1.0), (1.0, 1.0, 3.0), (0.5, 0.5, 2.0), (0.75, 1.5, 1.0)]


# ---------------------------------------------------------------- dsc


def test_dsc_examples():
    g = np.zeros((4, 4, 4), bool)
    g[1, 1, 1] = g[1, 1, 2] = True
    assert dsc(g, g) == 1.0
    p = np.zeros_like(g)
    p[1, 1, 1] = True
    assert dsc(p, g) == pytest.approx(2 / 3)
    q = np.zeros_like(g)
    q[3, 3, 3] = True
    assert dsc(q, g) == 0.0
    assert dsc(np.zeros_like(g), np.zeros_like(g)) == 1.0
    with pytest.raises(ShapeMismatch):
        dsc(g, g[:2])


# ---------------------------------------------------------------- boundary


def test_boundary_single_voxel_and_cube():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    assert np.array_equal(boundary_voxels(m), m)
    cube = np.zeros((5, 5, 5), bool)
    cube[1:4, 1:4, 1:4] = True
    b = boundary_voxels(cube)
    assert b.sum() == 26 and not b[2, 2, 2]


def test_boundary_grid_border_is_outside():
    assert boundary_voxels(np.ones((3, 3, 3), bool)).sum() == 26


def test_boundary_random_matches_scan():
    rng = np.random.default_rng(0)
    for _ in range(20):
        m = rng.random((9, 8, 7)) < 0.6
        assert np.array_equal(boundary_voxels(m), brute_boundary(m))


# ---------------------------------------------------------------- distance field


def test_distance_at_set_voxel_zero_and_axis_scaling():
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    d = distance_field(m, (1, 1, 3))
    assert d[2, 2, 2] == 0
    assert d[2, 2, 3] == 3.0
    assert d[3, 2, 2] == 1.0
    with pytest.raises(EmptyMask):
        distance_field(np.zeros((2, 2, 2), bool))


@pytest.mark.parametrize("spacing", [(1, 1, 1), (1, 1, 3), (2, 1, 3)])
def test_distance_field_matches_all_pairs_exactly(spacing):
    rng = np.random.default_rng(1)
    for _ in range(10):
        m = rng.random((12, 12, 12)) < rng.uniform(0.001, 0.05)
        if not m.any():
            m[tuple(rng.integers(0, 12, 3))] = True
        assert np.array_equal(squared_distance_field(m, spacing), all_pairs_sq(m, spacing))


def test_distance_field_lipschitz():
    rng = np.random.default_rng(2)
    for spacing in SPACINGS:
        m = random_blob(rng, (10, 11, 12))
        d = distance_field(m, spacing)
        assert (d >= 0).all() and np.array_equal(d == 0, m)
        for axis in range(3):
            step = np.abs(np.diff(d, axis=axis))
            assert step.max() <= spacing[axis] + 1e-12


# ---------------------------------------------------------------- nsd


def test_nsd_examples():
    g = random_blob(np.random.default_rng(3), (10, 10, 10))
    assert nsd(g, g) == 1.0
    a = np.zeros((6, 6, 6), bool)
    b = np.zeros_like(a)
    a[2, 2, 2] = True
    b[2, 2, 3] = True
    assert nsd(a, b, tau_mm=1.0) == 1.0
    c = np.zeros_like(a)
    c[2, 2, 4] = True
    assert nsd(a, c, tau_mm=1.0) == 0.0
    assert nsd(a, b, spacing=(1, 1, 3), tau_mm=1.0) == 0.0
    assert nsd(a, b, spacing=(1, 1, 3), tau_voxels=1.0) == 1.0
    z = np.zeros_like(a)
    assert nsd(z, z) == 1.0 and nsd(a, z) == 0.0 and nsd(z, a) == 0.0


def test_nsd_random_matches_end_to_end_oracle():
    rng = np.random.default_rng(4)
    for trial in range(30):
        g = random_blob(rng, (16, 16, 16))
        p = perturbed(rng, g)
        spacing = SPACINGS[trial % len(SPACINGS)]
        tau = [1.0, 1.5, 2.0][trial % 3]
        assert abs(nsd(p, g, spacing, tau) - brute_nsd(p, g, spacing, tau)) <= 1e-9
        assert abs(dsc(p, g) - brute_dsc(p, g)) <= 1e-9


def test_nsd_saturates_at_large_tau():
    rng = np.random.default_rng(5)
    for _ in range(10):
        p = random_blob(rng, (12, 12, 12))
        g = random_blob(rng, (12, 12, 12))
        diameter = float(np.linalg.norm(np.array((12, 12, 12)) * np.array((1, 1, 3))))
        assert nsd(p, g, (1, 1, 3), tau_mm=diameter) == 1.0


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_metric_symmetry_and_axis_permutation(data):
    shape = data.draw(st.tuples(*[st.integers(1, 7)] * 3))
    p = data.draw(arrays(bool, shape))
    g = data.draw(arrays(bool, shape))
    spacing = data.draw(st.sampled_from(SPACINGS))
    perm = data.draw(st.permutations([0, 1, 2]))
    assert dsc(p, g) == dsc(g, p)
    assert nsd(p, g, spacing) == nsd(g, p, spacing)
    pp, gp = np.transpose(p, perm), np.transpose(g, perm)
    sp = tuple(spacing[i] for i in perm)
    assert dsc(pp, gp) == dsc(p, g)
    assert nsd(pp, gp, sp) == pytest.approx(nsd(p, g, spacing), abs=1e-12)
    assert 0.0 <= nsd(p, g, spacing) <= 1.0


# ---------------------------------------------------------------- boxes


def test_tight_box_single_voxel():
    m = np.zeros((6, 6, 4), bool)
    m[2, 3, 1] = True
    assert tight_box(m) == [Rect(1, 2, 3, 2, 3)]


def test_tight_box_l_shape():
    m = np.zeros((8, 8, 1), bool)
    m[2:6, 1, 0] = True
    m[5, 1:5, 0] = True
    (r,) = tight_box(m)
    assert (r.r0, r.r1, r.c0, r.c1) == (2, 5, 1, 4)


def test_tight_box_random_matches_scan():
    rng = np.random.default_rng(6)
    for _ in range(10):
        m = rng.random((10, 9, 5)) < 0.05
        rects = {r.index: r for r in tight_box(m)}
        for k in range(5):
            pts = np.argwhere(m[:, :, k])
            if len(pts) == 0:
                assert k not in rects
                continue
            r = rects[k]
            assert (r.r0, r.c0) == tuple(pts.min(0)) and (r.r1, r.c1) == tuple(pts.max(0))


def test_loose_box_identity_clamp_determinism():
    rects = [Rect(0, 0, 0, 3, 3), Rect(1, 2, 2, 5, 6)]
    assert loose_box(rects, (10, 10), 0.0, seed=1) == rects
    edge = [Rect(0, 0, 0, 9, 9)]
    for seed in range(20):
        (r,) = loose_box(edge, (10, 10), 0.5, seed=seed)
        assert 0 <= r.r0 <= r.r1 <= 9 and 0 <= r.c0 <= r.c1 <= 9
    a = loose_box(rects, (100, 100), 0.08, seed=7)
    assert a == loose_box(rects, (100, 100), 0.08, seed=7)
    for orig, new in zip(rects, loose_box(rects * 50, (100, 100), 0.08, seed=3)):
        assert abs(new.r0 - orig.r0) <= 8 or new.r0 == 0
    with pytest.raises(ValueError):
        loose_box(rects, (10, 10), 1.0)


def test_loose_box_shift_range_covers_bounds():
    rect = [Rect(0, 50, 50, 60, 60)] * 2000
    out = loose_box(rect, (100, 50), 0.08, seed=0)
    dr = {r.r0 - 50 for r in out}
    assert dr == set(range(-8, 9))


def test_box_as_prediction_examples():
    g = np.zeros((6, 6, 3), bool)
    g[1:4, 2:5, 0:2] = True
    assert dsc(box_as_prediction(tight_box(g), g.shape), g) == 1.0
    l_shape = np.zeros((4, 4, 1), bool)
    l_shape[0, 0, 0] = l_shape[1, 0, 0] = l_shape[1, 1, 0] = True
    assert dsc(box_as_prediction(tight_box(l_shape), l_shape.shape), l_shape) == pytest.approx(6 / 7)


def per_slice_rectangular(m):
    for k in range(m.shape[2]):
        pts = np.argwhere(m[:, :, k])
        if len(pts) and len(pts) != np.prod(pts.max(0) - pts.min(0) + 1):
            return False
    return True


def test_oracle_box_dsc_property():
    rng = np.random.default_rng(8)
    for _ in range(40):
        g = random_blob(rng, (10, 10, 6)) if rng.random() < 0.7 else np.zeros((10, 10, 6), bool)
        if rng.random() < 0.3:
            g = np.zeros((10, 10, 6), bool)
            g[2:5, 3:8, 1:4] = True
        pred = box_as_prediction(tight_box(g), g.shape)
        score = brute_dsc(pred, g)
        assert score <= 1.0
        assert (score == 1.0) == per_slice_rectangular(g)


# ---------------------------------------------------------------- aggregate


def catalog():
    return Catalog(
        [
            Terminology.create("liver", "CT", "Abdomen"),
            Terminology.create("spleen", "CT", "Abdomen"),
            Terminology.create("lung", "CT", "Thorax"),
            Terminology.create("liver tumor", "CT", "Lesion"),
            Terminology.create("aorta", "CT", "WholeBody"),
        ]
    )


def test_macro_average_worked_example():
    recs = [
        MetricsRecord("liver__ct", "A", "a1", 0.9, 0.9),
        MetricsRecord("liver__ct", "A", "a2", 0.7, 0.7),
        MetricsRecord("liver__ct", "B", "b1", 0.6, 0.6),
    ]
    rep = aggregate(recs, catalog())
    assert rep.classes["liver__ct"].dsc == 0.7
    assert rep.classes["liver__ct"].count == 3


def test_region_average():
    recs = [MetricsRecord("liver__ct", "A", "a", 0.7, 0.5), MetricsRecord("spleen__ct", "A", "a", 0.9, 0.5)]
    rep = aggregate(recs, catalog())
    assert rep.regions["Abdomen"].dsc == pytest.approx(0.8, abs=1e-15)
    assert rep.datasets["A"].dsc == pytest.approx(0.8, abs=1e-15)


def test_single_record_all_views():
    rep = aggregate([MetricsRecord("lung__ct", "A", "a", 0.42, 0.37)], catalog())
    for cell in (rep.classes["lung__ct"], rep.regions["Thorax"], rep.regions["All"], rep.datasets["A"]):
        assert (cell.dsc, cell.nsd, cell.count) == (0.42, 0.37, 1)


def test_lesion_and_whole_body_routing():
    recs = [MetricsRecord("liver_tumor__ct", "A", "a", 0.5, 0.5), MetricsRecord("aorta__ct", "A", "a", 0.6, 0.6)]
    rep = aggregate(recs, catalog())
    assert set(rep.regions) == {"Lesion", "WholeBody", "All"}


def test_unknown_terminology():
    with pytest.raises(UnknownTerminology):
        aggregate([MetricsRecord("nope__ct", "A", "a", 0.5, 0.5)], catalog())


def test_record_range_checked():
    with pytest.raises(ValueError):
        MetricsRecord("lung__ct", "A", "a", 1.2, 0.5)


def test_grand_mean_reconstruction_and_single_contribution():
    rng = np.random.default_rng(9)
    terms = [t.id for t in catalog()]
    recs = [
        MetricsRecord(str(rng.choice(terms)), str(rng.choice(["A", "B", "C"])), f"s{i}", float(rng.random()), float(rng.random()))
        for i in range(500)
    ]
    rep = aggregate(recs, catalog())
    for metric in ("dsc", "nsd"):
        grand = np.mean([getattr(r, metric) for r in recs])
        recon = sum(getattr(c, metric) * c.count for c in rep.cells.values()) / sum(c.count for c in rep.cells.values())
        assert abs(recon - grand) <= 1e-12
    n = len(recs)
    assert sum(c.count for c in rep.classes.values()) == n
    assert sum(c.count for c in rep.datasets.values()) == n
    assert sum(c.count for k, c in rep.regions.items() if k != "All") == n
    assert rep.regions["All"].dsc == pytest.approx(np.mean([c.dsc for c in rep.classes.values()]), abs=1e-15)


def test_report_files(tmp_path):
    recs = [MetricsRecord("lung__ct", "A", "a", 1.0, 1.0), MetricsRecord("aorta__ct", "B", "b", 0.5, 0.25)]
    write_records(tmp_path / "records.jsonl", recs)
    assert read_records(tmp_path / "records.jsonl") == recs
    write_report(tmp_path, aggregate(recs, catalog()))
    header = (tmp_path / "report.csv").read_text().splitlines()[0]
    assert header == "metric,Thorax,WholeBody,All"
    assert (tmp_path / "report.json").exists() and (tmp_path / "classes.csv").exists()
