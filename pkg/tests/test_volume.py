import itertools

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from satkit.errors import AllZeroVolume, InvalidAxcodes, SingularAffine
from satkit.volume import (
    LabelVolume,
    Modality,
    PatchSpec,
    Volume,
    axcodes_of,
    crop_nonzero,
    crop_patch,
    normalize,
    reorient,
    resample,
)


def world_coords(affine, shape):
    """Brute-force voxel-center world coordinates, indexed like the data."""
    out = np.empty(tuple(shape) + (3,))
    for idx in itertools.product(*map(range, shape)):
        out[idx] = (affine @ np.array([*idx, 1.0]))[:3]
    return out


# ---------------------------------------------------------------- reorient


def test_reorient_identity_when_already_target():
    v = Volume(np.random.default_rng(0).random((3, 4, 5)))
    assert axcodes_of(v.affine) == "RAS"
    assert reorient(v, "RAS") is v


def test_reorient_single_flip_preserves_world_positions():
    rng = np.random.default_rng(1)
    aff = np.diag([2.0, 1.0, 3.0, 1.0])
    aff[:3, 3] = [5, -3, 10]
    v = Volume(rng.random((4, 5, 6)), aff)
    out = reorient(v, "LAS")
    assert out.axcodes == "LAS"
    np.testing.assert_array_equal(out.data, v.data[::-1])
    assert out.affine[0, 0] == -2.0
    assert out.affine[0, 3] == 5 + 2.0 * 3
    before = {tuple(w): val for w, val in zip(world_coords(v.affine, v.shape).reshape(-1, 3), v.data.ravel())}
    after = world_coords(out.affine, out.shape).reshape(-1, 3)
    for w, val in zip(after, out.data.ravel()):
        assert before[tuple(w)] == val


@pytest.mark.parametrize("target", ["RAS", "LPS", "SAR", "IPL", "ASL", "PIR"])
def test_reorient_permutation_world_positions(target):
    rng = np.random.default_rng(2)
    aff = np.array([[0, 0, -3.0, 12], [2.0, 0, 0, -4], [0, -1.0, 0, 9], [0, 0, 0, 1]])
    v = Volume(rng.random((3, 4, 5)), aff)
    out = reorient(v, target)
    assert out.axcodes == target
    before = {tuple(w): val for w, val in zip(world_coords(v.affine, v.shape).reshape(-1, 3), v.data.ravel())}
    after = world_coords(out.affine, out.shape).reshape(-1, 3)
    for w, val in zip(after, out.data.ravel()):
        assert before[tuple(w)] == val
    back = reorient(out, v.axcodes)
    assert np.array_equal(back.data, v.data)
    assert np.array_equal(back.affine, v.affine)
    assert sorted(out.data.ravel()) == sorted(v.data.ravel())


def test_reorient_errors():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(InvalidAxcodes):
        reorient(v, "RRS")
    with pytest.raises(InvalidAxcodes):
        reorient(v, "RAX")
    with pytest.raises(SingularAffine):
        axcodes_of(np.diag([1.0, 0.0, 1.0, 1.0]))


def test_reorient_label_volume():
    lab = LabelVolume(np.arange(8).reshape(2, 2, 2), code_map={1: "x"})
    out = reorient(lab, "LPS")
    assert out.data.dtype == np.uint16
    np.testing.assert_array_equal(out.data, lab.data[::-1, ::-1])
    assert out.code_map == lab.code_map


# ---------------------------------------------------------------- resample


def test_resample_constant_preserved():
    v = Volume(np.full((5, 6, 7), 4.25), np.diag([0.7, 1.3, 2.9, 1.0]))
    out = resample(v, (1.0, 1.0, 3.0))
    assert out.shape == (4, 8, 7)
    assert np.all(out.data == 4.25)


def test_resample_reproduces_trilinear_field():
    aff = np.diag([2.0, 2.0, 2.0, 1.0])
    aff[:3, 3] = [1.0, -2.0, 3.0]
    shape = (6, 7, 8)
    w = world_coords(aff, shape)
    f = lambda p: p[..., 0] + 2 * p[..., 1] + 3 * p[..., 2]
    v = Volume(f(w), aff)
    out = resample(v, (1.0, 1.0, 1.0))
    assert out.shape == (12, 14, 16)
    expected = f(world_coords(out.affine, out.shape))
    interior = (slice(0, 11), slice(0, 13), slice(0, 15))
    assert np.max(np.abs(out.data[interior] - expected[interior])) <= 1e-9


def test_resample_full_trilinear_field_with_cross_terms():
    shape = (5, 5, 5)
    aff = np.diag([3.0, 3.0, 3.0, 1.0])
    w = world_coords(aff, shape)
    f = lambda p: 1 + p[..., 0] * p[..., 1] - 0.5 * p[..., 1] * p[..., 2] + 0.1 * p[..., 0] * p[..., 1] * p[..., 2]
    out = resample(Volume(f(w), aff), (1.0, 1.5, 0.75))
    expected = f(world_coords(out.affine, out.shape))
    lim = tuple(slice(0, int(np.floor(12 / s)) + 1) for s in (1.0, 1.5, 0.75))
    assert np.max(np.abs(out.data[lim] - expected[lim])) <= 1e-9


def test_resample_labels_nearest_closure():
    idx = np.indices((12, 12, 12)).astype(float)
    sphere = ((idx - 5.5) ** 2).sum(axis=0) <= 16
    lab = LabelVolume(sphere.astype(np.uint16), np.diag([1.0, 1.0, 1.0, 1.0]))
    out = resample(lab, (0.7, 1.3, 3.0))
    assert set(np.unique(out.data)) <= {0, 1}
    assert out.data.dtype == np.uint16


def test_resample_output_shape_and_extent():
    v = Volume(np.zeros((10, 11, 7)), np.diag([0.8, 0.8, 5.0, 1.0]))
    out = resample(v)
    assert out.shape == (8, 9, 12)
    np.testing.assert_allclose(out.spacing, [1.0, 1.0, 3.0])
    assert np.all(np.array(out.shape) * out.spacing >= np.array(v.shape) * v.spacing - 1e-9)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(*[st.integers(1, 6)] * 3), elements=st.floats(-1e3, 1e3)),
    st.tuples(*[st.sampled_from([0.5, 1.0, 1.7, 3.0])] * 3),
)
def test_resample_properties(data, target):
    v = Volume(data, np.diag([1.2, 0.9, 2.5, 1.0]))
    once = resample(v, target)
    twice = resample(once, target)
    assert twice.shape == once.shape
    assert np.max(np.abs(twice.data - once.data)) <= 1e-12
    assert once.data.min() >= data.min() and once.data.max() <= data.max()


# ---------------------------------------------------------------- crop_nonzero


def brute_bbox(data):
    lo = [None] * 3
    hi = [None] * 3
    for idx in itertools.product(*map(range, data.shape)):
        if data[idx] != 0:
            for a in range(3):
                lo[a] = idx[a] if lo[a] is None else min(lo[a], idx[a])
                hi[a] = idx[a] if hi[a] is None else max(hi[a], idx[a])
    return lo, hi


def test_crop_nonzero_full_volume_unchanged():
    v = Volume(np.ones((3, 4, 5)))
    out, _, off = crop_nonzero(v)
    assert off == (0, 0, 0) and out.shape == v.shape


def test_crop_nonzero_single_voxel():
    d = np.zeros((8, 8, 8))
    d[3, 4, 5] = -2
    lab = LabelVolume(np.zeros((8, 8, 8), np.uint16))
    out, lout, off = crop_nonzero(Volume(d), lab)
    assert out.shape == (1, 1, 1) and off == (3, 4, 5)
    assert lout.shape == (1, 1, 1)
    np.testing.assert_array_equal(out.affine[:3, 3], [3, 4, 5])


def test_crop_nonzero_random_matches_scan():
    rng = np.random.default_rng(3)
    for _ in range(20):
        d = np.where(rng.random((9, 10, 11)) < 0.01, rng.normal(size=(9, 10, 11)), 0.0)
        if not d.any():
            continue
        lo, hi = brute_bbox(d)
        out, _, off = crop_nonzero(Volume(d))
        assert list(off) == lo
        assert [o + s - 1 for o, s in zip(off, out.shape)] == hi
        again, _, off2 = crop_nonzero(out)
        assert off2 == (0, 0, 0) and np.array_equal(again.data, out.data)


def test_crop_nonzero_all_zero():
    with pytest.raises(AllZeroVolume):
        crop_nonzero(Volume(np.zeros((2, 2, 2))))


# ---------------------------------------------------------------- normalize


def test_normalize_ct_worked_example():
    v = Volume(np.array([-1000.0, 0.0, 2000.0]).reshape(3, 1, 1), modality="CT")
    mp.mp.dps = 40
    clamped = [mp.mpf(-500), mp.mpf(0), mp.mpf(1000)]
    mean = sum(clamped) / 3
    std = mp.sqrt(sum((x - mean) ** 2 for x in clamped) / 3)
    expected = [float((x - mean) / std) for x in clamped]
    # frozen from the oracle: population std 623.6096, not 624.5
    np.testing.assert_allclose(expected, [-1.0690449676, -0.2672612419, 1.3363062095], atol=1e-9)
    out = normalize(v)
    np.testing.assert_allclose(out.data.ravel(), expected, atol=1e-12)


def test_normalize_constant_maps_to_zero():
    assert np.all(normalize(Volume(np.full((3, 3, 3), 42.0))).data == 0)


def sort_percentile(values, q):
    s = np.sort(values.ravel())
    pos = q / 100 * (len(s) - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


@pytest.mark.parametrize("modality", ["MRI", "PET"])
def test_normalize_percentile_clamp(modality):
    rng = np.random.default_rng(4)
    d = rng.normal(100, 10, size=(10, 10, 10))
    d[0, 0, 0] = 1e6
    v = Volume(d, modality=modality)
    hi = sort_percentile(d, 99.5)
    lo = sort_percentile(d, 0.5)
    clamped = np.clip(d, lo, hi)
    assert clamped[0, 0, 0] == hi
    out = normalize(v)
    expected = (clamped - clamped.mean()) / clamped.std()
    np.testing.assert_allclose(out.data, expected, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, st.tuples(*[st.integers(1, 6)] * 3), elements=st.floats(-3000, 3000)),
    st.sampled_from(list(Modality)),
)
def test_normalize_moments(data, modality):
    out = normalize(Volume(data, modality=modality)).data
    assert not np.isnan(out).any()
    if out.std() > 0:
        assert abs(out.mean()) <= 1e-9
        assert abs(out.std() - 1) <= 1e-9


def test_ct_clamp_bounds_exact():
    d = np.linspace(-3000, 3000, 1000).reshape(10, 10, 10)
    v = Volume(d)
    from satkit.volume import intensity_bounds

    assert intensity_bounds(v) == (-500.0, 1000.0)


# ---------------------------------------------------------------- crop_patch


def test_crop_patch_identity():
    rng = np.random.default_rng(5)
    v = Volume(rng.random((4, 5, 6)))
    lab = LabelVolume(rng.integers(0, 3, (4, 5, 6)))
    pv, pl = crop_patch(v, lab, PatchSpec((0, 0, 0), (4, 5, 6)))
    assert np.array_equal(pv.data, v.data) and np.array_equal(pl.data, lab.data)


def test_crop_patch_pads_small_volume():
    v = Volume(np.ones((10, 10, 10)))
    lab = LabelVolume(np.ones((10, 10, 10)))
    pv, pl = crop_patch(v, lab, PatchSpec((0, 0, 0), (16, 16, 16)))
    assert pv.shape == (16, 16, 16)
    assert pv.data[:10, :10, :10].sum() == 1000 and pv.data.sum() == 1000
    assert pl.data.sum() == 1000


def test_crop_patch_random_origin_is_slice():
    rng = np.random.default_rng(6)
    d = rng.random((30, 25, 20))
    v = Volume(d)
    for _ in range(20):
        ext = tuple(int(x) for x in rng.integers(1, 10, 3))
        org = tuple(int(rng.integers(0, s - e + 1)) for s, e in zip(d.shape, ext))
        pv, _ = crop_patch(v, None, PatchSpec(org, ext))
        assert np.array_equal(pv.data, d[org[0]:org[0] + ext[0], org[1]:org[1] + ext[1], org[2]:org[2] + ext[2]])


def test_patch_spec_default_extent():
    assert PatchSpec().extent == (288, 288, 96)
