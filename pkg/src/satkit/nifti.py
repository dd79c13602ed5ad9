"""Minimal NIfTI-1 single-file reader and writer.

Only the subset needed for 3D scalar volumes is supported: ``.nii`` or
``.nii.gz``, ``dim[0] == 3``, and the six datatypes listed in
:data:`DATATYPES`. Byte order is detected from ``sizeof_hdr``.
"""

from __future__ import annotations

import gzip
import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, MalformedHeader, UnsupportedDatatype

HEADER_SIZE = 348
MAGIC = b"n+1\0"

# NIfTI datatype code -> numpy dtype (native byte order; fixed at read time)
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
    512: np.dtype(np.uint16),
}
_CODE_FOR_DTYPE = {v: k for k, v in DATATYPES.items()}


@dataclass
class NiftiHeader:
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: float
    scl_slope: float
    scl_inter: float
    qform_code: int
    sform_code: int
    quatern: tuple[float, float, float]
    qoffset: tuple[float, float, float]
    srow: np.ndarray  # 3x4
    endian: str

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.dim[1:4])

    def affine(self) -> np.ndarray:
        """Voxel-to-world matrix, preferring sform, then qform, then pixdim."""
        aff = np.eye(4)
        if self.sform_code > 0:
            aff[:3, :] = self.srow
        elif self.qform_code > 0:
            aff[:3, :3] = _quaternion_matrix(self.quatern, self.pixdim)
            aff[:3, 3] = self.qoffset
        else:
            aff[:3, :3] = np.diag(self.pixdim[1:4])
        return aff


def _quaternion_matrix(quatern, pixdim) -> np.ndarray:
    b, c, d = quatern
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        # rotation by 180 degrees; renormalise (b, c, d)
        norm = math.sqrt(b * b + c * c + d * d)
        b, c, d = b / norm, c / norm, d / norm
        a = 0.0
    else:
        a = math.sqrt(a2)
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    return rot @ np.diag([pixdim[1], pixdim[2], pixdim[3] * qfac])


def _read_bytes(path: Path) -> bytes:
    raw = Path(path).read_bytes()
    # gzip member magic; independent of the file suffix
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            break
    else:
        raise MalformedHeader("sizeof_hdr is not 348 in either byte order")
    if raw[344:348] != MAGIC:
        raise MalformedHeader(f"bad magic {raw[344:348]!r}, expected {MAGIC!r}")

    e = endian
    dim = struct.unpack_from(e + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(e + "2h", raw, 70)
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(e + "3f", raw, 108)
    qform_code, sform_code = struct.unpack_from(e + "2h", raw, 252)
    quatern = struct.unpack_from(e + "3f", raw, 256)
    qoffset = struct.unpack_from(e + "3f", raw, 268)
    srow = np.array(struct.unpack_from(e + "12f", raw, 280), dtype=np.float64).reshape(3, 4)

    if dim[0] != 3:
        raise DimensionError(f"dim[0] = {dim[0]}; only 3D volumes are supported")
    if any(n < 1 for n in dim[1:4]):
        raise DimensionError(f"non-positive extent in dim {dim[1:4]}")
    if datatype not in DATATYPES:
        raise UnsupportedDatatype(f"datatype code {datatype}")

    return NiftiHeader(
        dim=tuple(dim),
        datatype=datatype,
        bitpix=bitpix,
        pixdim=tuple(float(p) for p in pixdim),
        vox_offset=float(vox_offset),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        qform_code=qform_code,
        sform_code=sform_code,
        quatern=tuple(float(q) for q in quatern),
        qoffset=tuple(float(q) for q in qoffset),
        srow=srow,
        endian=endian,
    )


def read_nifti(path) -> tuple[np.ndarray, np.ndarray, NiftiHeader]:
    """Return ``(data, affine, header)`` with data as float64, scaling applied."""
    raw = _read_bytes(path)
    hdr = parse_header(raw)
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endian)
    offset = int(hdr.vox_offset) if hdr.vox_offset >= HEADER_SIZE else HEADER_SIZE + 4
    count = int(np.prod(hdr.shape))
    if len(raw) < offset + count * dtype.itemsize:
        raise MalformedHeader("truncated voxel data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    data = flat.reshape(hdr.shape, order="F").astype(np.float64)
    slope, inter = hdr.scl_slope, hdr.scl_inter
    if slope != 0.0 and math.isfinite(slope):
        data = data * slope + (inter if math.isfinite(inter) else 0.0)
    return data, hdr.affine(), hdr


def read_nifti_raw(path) -> tuple[np.ndarray, np.ndarray]:
    """Return stored voxel values in their on-disk dtype (no scaling), plus affine."""
    raw = _read_bytes(path)
    hdr = parse_header(raw)
    dtype = DATATYPES[hdr.datatype].newbyteorder(hdr.endian)
    offset = int(hdr.vox_offset) if hdr.vox_offset >= HEADER_SIZE else HEADER_SIZE + 4
    flat = np.frombuffer(raw, dtype=dtype, count=int(np.prod(hdr.shape)), offset=offset)
    return flat.reshape(hdr.shape, order="F").astype(dtype.newbyteorder("=")), hdr.affine()


def encode_nifti(data: np.ndarray, affine: np.ndarray, *, scl_slope=1.0, scl_inter=0.0) -> bytes:
    """Serialise a 3D array as little-endian NIfTI-1 bytes (sform_code 2)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise DimensionError(f"expected a 3D array, got {data.ndim}D")
    dtype = data.dtype.newbyteorder("=")
    if dtype not in _CODE_FOR_DTYPE:
        raise UnsupportedDatatype(str(data.dtype))
    code = _CODE_FOR_DTYPE[dtype]
    affine = np.asarray(affine, dtype=np.float64)
    spacing = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", hdr, 70, code, dtype.itemsize * 8)
    struct.pack_into("<8f", hdr, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<3f", hdr, 108, float(HEADER_SIZE + 4), scl_slope, scl_inter)
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 2)
    struct.pack_into("<12f", hdr, 280, *affine[:3, :].ravel())
    hdr[344:348] = MAGIC

    buf = io.BytesIO()
    buf.write(bytes(hdr))
    buf.write(b"\0\0\0\0")  # no extensions
    buf.write(np.asarray(data, dtype=dtype.newbyteorder("<")).tobytes(order="F"))
    return buf.getvalue()


def write_nifti(path, data: np.ndarray, affine: np.ndarray, **kwargs) -> None:
    """Write ``data`` to ``path``; gzip if the name ends in ``.gz``.

    Gzip output carries mtime 0 and no filename so identical inputs give
    byte-identical files.
    """
    payload = encode_nifti(data, affine, **kwargs)
    path = Path(path)
    if path.suffix == ".gz":
        out = io.BytesIO()
        with gzip.GzipFile(filename="", mode="wb", fileobj=out, mtime=0) as gz:
            gz.write(payload)
        payload = out.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(payload)
