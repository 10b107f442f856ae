"""Minimal NIfTI-1 reader/writer.

Supports single-file .nii / .nii.gz volumes: the 348-byte header, the
standard scalar datatypes, scl_slope/scl_inter scaling, and the sform/qform
affine (voxel index -> world mm, RAS+ convention). Covers what this pipeline
needs; no extensions, no multi-frame images.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"

# NIfTI-1 datatype code -> numpy dtype
_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class NiftiFormatError(ValueError):
    pass


def _open(path, mode):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _quaternion_to_rotation(b, c, d):
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def read_nifti(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a .nii/.nii.gz file.

    Returns (data, affine): data as the stored dtype (float64 when header
    scaling applies), affine the 4x4 voxel->world matrix (sform preferred,
    then qform, then pixdim fallback).
    """
    with _open(path, "rb") as f:
        raw = f.read()
    if len(raw) < HEADER_SIZE:
        raise NiftiFormatError(f"{path}: file shorter than a NIfTI-1 header")

    byte_order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != HEADER_SIZE:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != HEADER_SIZE:
            raise NiftiFormatError(f"{path}: not a NIfTI-1 file (sizeof_hdr != 348)")
        byte_order = ">"

    magic = raw[344:348]
    if magic not in (MAGIC_SINGLE, b"ni1\x00"):
        raise NiftiFormatError(f"{path}: bad magic {magic!r}")
    if magic != MAGIC_SINGLE:
        raise NiftiFormatError(f"{path}: two-file (.hdr/.img) NIfTI is not supported")

    dim = struct.unpack_from(byte_order + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiFormatError(f"{path}: invalid dim[0] = {ndim}")
    shape = tuple(dim[1 : 1 + ndim])
    if ndim > 3:
        if any(s != 1 for s in shape[3:]):
            raise NiftiFormatError(f"{path}: only 3D volumes supported, got shape {shape}")
        shape = shape[:3]
    if len(shape) < 3:
        shape = shape + (1,) * (3 - len(shape))

    (datatype, bitpix) = struct.unpack_from(byte_order + "2h", raw, 70)
    if datatype not in _DTYPES:
        raise NiftiFormatError(f"{path}: unsupported datatype code {datatype}")
    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(byte_order)

    pixdim = struct.unpack_from(byte_order + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(byte_order + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(byte_order + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(byte_order + "2h", raw, 252)
    quatern = struct.unpack_from(byte_order + "6f", raw, 256)
    srow = struct.unpack_from(byte_order + "12f", raw, 280)

    n_items = int(np.prod(shape))
    start = int(vox_offset)
    end = start + n_items * dtype.itemsize
    if end > len(raw):
        raise NiftiFormatError(f"{path}: truncated data section")
    data = np.frombuffer(raw, dtype=dtype, count=n_items, offset=start)
    data = data.reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("="))

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float64) * slope + scl_inter

    if sform_code > 0:
        affine = np.eye(4)
        affine[0, :] = srow[0:4]
        affine[1, :] = srow[4:8]
        affine[2, :] = srow[8:12]
    elif qform_code > 0:
        b, c, d, ox, oy, oz = quatern
        rot = _quaternion_to_rotation(b, c, d)
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        zooms = np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
        affine = np.eye(4)
        affine[:3, :3] = rot * zooms
        affine[:3, 3] = (ox, oy, oz)
    else:
        affine = np.diag([pixdim[1], pixdim[2], pixdim[3], 1.0])

    return data, affine


def write_nifti(path, data: np.ndarray, affine: np.ndarray, dtype=None, descrip: str = "") -> None:
    """Write a 3D array as a single-file NIfTI-1 volume (little-endian).

    The affine is stored as the sform; a matching qform is emitted only for
    axis-aligned RAS grids (identity rotation), which is what this pipeline
    produces.
    """
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiFormatError(f"expected a 3D array, got shape {data.shape}")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4):
        raise NiftiFormatError("affine must be 4x4")
    if dtype is not None:
        data = data.astype(dtype)
    dt = np.dtype(data.dtype).newbyteorder("=")
    if np.dtype(dt) not in _DTYPE_CODES:
        raise NiftiFormatError(f"unsupported output dtype {data.dtype}")
    code = _DTYPE_CODES[np.dtype(dt)]
    bitpix = dt.itemsize * 8

    spacing = np.sqrt((affine[:3, :3] ** 2).sum(axis=0))
    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    struct.pack_into("<b", header, 39, 0)  # dim_info
    struct.pack_into("<8h", header, 40, 3, *data.shape, 1, 1, 1, 1)
    struct.pack_into("<2h", header, 70, code, bitpix)
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", header, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", header, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<b", header, 123, 2)  # xyzt_units: mm
    struct.pack_into("<80s", header, 148, descrip.encode()[:79])

    # qform only for plain axis-aligned RAS grids; sform always
    is_diag_ras = np.allclose(affine[:3, :3], np.diag(spacing), atol=1e-9) and (spacing > 0).all()
    qform_code = 1 if is_diag_ras else 0
    struct.pack_into("<2h", header, 252, qform_code, 1)
    if is_diag_ras:
        struct.pack_into("<6f", header, 256, 0.0, 0.0, 0.0, *affine[:3, 3])
    struct.pack_into("<12f", header, 280, *affine[0, :], *affine[1, :], *affine[2, :])
    struct.pack_into("<4s", header, 344, MAGIC_SINGLE)

    with _open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00\x00\x00\x00")  # no extensions
        f.write(data.astype(dt).tobytes(order="F"))
