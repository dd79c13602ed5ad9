import gzip
import struct

import nibabel as nib
import numpy as np
import pytest

from satkit import nifti
from satkit.errors import DimensionError, MalformedHeader, UnsupportedDatatype
from satkit.volume import Volume, LabelVolume, load_nifti, save_nifti


def _write_ref(path, data, affine, slope=None, inter=None):
    img = nib.Nifti1Image(data, affine)
    if slope is not None:
        img.header.set_slope_inter(slope, inter)
    nib.save(img, str(path))


def test_identity_float32_roundtrip(tmp_path):
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    p = tmp_path / "a.nii"
    _write_ref(p, data, np.eye(4))
    vol, lbl = load_nifti(p)
    assert lbl is None
    np.testing.assert_array_equal(vol.spacing, [1, 1, 1])
    np.testing.assert_array_equal(vol.data, data.astype(np.float64))


def test_gzip_is_transparent(tmp_path):
    data = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
    _write_ref(tmp_path / "a.nii", data, np.eye(4))
    _write_ref(tmp_path / "a.nii.gz", data, np.eye(4))
    a, _ = load_nifti(tmp_path / "a.nii")
    b, _ = load_nifti(tmp_path / "a.nii.gz")
    np.testing.assert_array_equal(a.data, b.data)
    np.testing.assert_array_equal(a.affine, b.affine)


def test_slope_intercept_applied(tmp_path):
    data = np.full((2, 2, 2), 3, dtype=np.int16)
    p = tmp_path / "s.nii"
    _write_ref(p, data, np.eye(4), slope=2.0, inter=1.0)
    # confirm the reference writer stored the raw code, not the scaled value
    raw = nib.load(str(p)).dataobj.get_unscaled()
    assert raw[0, 0, 0] == 3
    vol, _ = load_nifti(p)
    assert np.all(vol.data == 7.0)


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.int32, np.float32, np.float64, np.uint16])
def test_supported_dtypes_match_reference_reader(tmp_path, dtype):
    rng = np.random.default_rng(1)
    data = (rng.random((4, 3, 2)) * 100).astype(dtype)
    affine = np.diag([0.5, 2.0, 3.0, 1.0])
    affine[:3, 3] = [-10, 5, 7]
    p = tmp_path / "d.nii"
    _write_ref(p, data, affine)
    ref = nib.load(str(p))
    out, aff, hdr = nifti.read_nifti(p)
    np.testing.assert_array_equal(out, np.asarray(ref.get_fdata()))
    np.testing.assert_allclose(aff, ref.affine)


def test_qform_only_matches_reference(tmp_path):
    theta = 0.3
    rot = np.array([[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]])
    affine = np.eye(4)
    affine[:3, :3] = rot @ np.diag([1.5, 1.0, 2.5])
    affine[:3, 3] = [1, 2, 3]
    img = nib.Nifti1Image(np.zeros((2, 3, 4), np.float32), None)
    img.set_qform(affine, code=1)
    img.set_sform(None, code=0)
    p = tmp_path / "q.nii"
    nib.save(img, str(p))
    _, aff, _ = nifti.read_nifti(p)
    np.testing.assert_allclose(aff, nib.load(str(p)).get_qform(), atol=1e-6)


def test_big_endian_detected(tmp_path):
    data = np.arange(24, dtype=">f4").reshape(2, 3, 4)
    hdr = nib.Nifti1Header(endianness=">")
    img = nib.Nifti1Image(data, np.eye(4), header=hdr)
    p = tmp_path / "be.nii"
    nib.save(img, str(p))
    assert struct.unpack_from(">i", p.read_bytes(), 0)[0] == 348
    out, _, h = nifti.read_nifti(p)
    assert h.endian == ">"
    np.testing.assert_array_equal(out, data.astype(np.float64))


def test_errors(tmp_path):
    good = nifti.encode_nifti(np.zeros((2, 2, 2)), np.eye(4))

    bad_magic = bytearray(good)
    bad_magic[344:348] = b"ni1\0"
    (tmp_path / "m.nii").write_bytes(bytes(bad_magic))
    with pytest.raises(MalformedHeader):
        nifti.read_nifti(tmp_path / "m.nii")

    bad_size = bytearray(good)
    struct.pack_into("<i", bad_size, 0, 540)
    (tmp_path / "z.nii").write_bytes(bytes(bad_size))
    with pytest.raises(MalformedHeader):
        nifti.read_nifti(tmp_path / "z.nii")

    bad_type = bytearray(good)
    struct.pack_into("<h", bad_type, 70, 32)  # complex64
    (tmp_path / "t.nii").write_bytes(bytes(bad_type))
    with pytest.raises(UnsupportedDatatype):
        nifti.read_nifti(tmp_path / "t.nii")

    bad_dim = bytearray(good)
    struct.pack_into("<h", bad_dim, 40, 4)
    (tmp_path / "d.nii").write_bytes(bytes(bad_dim))
    with pytest.raises(DimensionError):
        nifti.read_nifti(tmp_path / "d.nii")


def test_own_writer_roundtrip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    affine = np.array([[0, 0, 3.0, -20], [-1.5, 0, 0, 40], [0, 2.0, 0, 7.25], [0, 0, 0, 1]])
    vol = Volume(rng.standard_normal((5, 6, 7)), affine)
    for name in ("v.nii", "v.nii.gz"):
        save_nifti(tmp_path / name, vol)
        back, _ = load_nifti(tmp_path / name)
        assert np.array_equal(back.data, vol.data)
        assert np.array_equal(back.affine, vol.affine)
        assert np.array_equal(back.spacing, vol.spacing)


def test_own_writer_readable_by_reference(tmp_path):
    lab = LabelVolume(np.arange(24).reshape(2, 3, 4), np.diag([1, 1, 3, 1.0]))
    save_nifti(tmp_path / "l.nii.gz", lab)
    ref = nib.load(str(tmp_path / "l.nii.gz"))
    assert ref.get_data_dtype() == np.uint16
    np.testing.assert_array_equal(np.asarray(ref.dataobj), lab.data)
    np.testing.assert_array_equal(ref.affine, lab.affine)


def test_gzip_output_is_deterministic(tmp_path):
    vol = Volume(np.ones((3, 3, 3)))
    save_nifti(tmp_path / "a.nii.gz", vol)
    save_nifti(tmp_path / "b.nii.gz", vol)
    assert (tmp_path / "a.nii.gz").read_bytes() == (tmp_path / "b.nii.gz").read_bytes()
    assert gzip.decompress((tmp_path / "a.nii.gz").read_bytes())[344:348] == b"n+1\0"
