import gzip
import struct

import numpy as np
import pytest

from subseg.nifti import NiftiFormatError, read_nifti, write_nifti


def random_affine(rng):
    # axis-aligned with random flips/permutation and translation
    perm = rng.permutation(3)
    signs = rng.choice([-1, 1], size=3)
    affine = np.zeros((4, 4))
    for j, (p, s) in enumerate(zip(perm, signs)):
        affine[p, j] = s * rng.uniform(0.5, 3.0)
    affine[:3, 3] = rng.uniform(-50, 50, size=3)
    affine[3, 3] = 1.0
    return affine


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_round_trip_float32(tmp_path, suffix):
    rng = np.random.default_rng(1)
    data = rng.random((7, 5, 9), dtype=np.float32)
    affine = random_affine(rng)
    path = tmp_path / f"vol{suffix}"
    write_nifti(path, data, affine)
    out, out_affine = read_nifti(path)
    assert out.dtype == np.float32
    np.testing.assert_array_equal(out, data)
    np.testing.assert_allclose(out_affine, affine, atol=1e-5)


def test_round_trip_int16_labels(tmp_path):
    rng = np.random.default_rng(2)
    data = rng.integers(0, 78, size=(6, 6, 6)).astype(np.int16)
    path = tmp_path / "labels.nii.gz"
    write_nifti(path, data, np.eye(4))
    out, _ = read_nifti(path)
    assert out.dtype == np.int16
    np.testing.assert_array_equal(out, data)


def test_qform_emitted_for_ras_grid(tmp_path):
    affine = np.eye(4)
    affine[:3, 3] = (-128.0, -120.0, -110.0)
    path = tmp_path / "vol.nii"
    write_nifti(path, np.zeros((4, 4, 4), dtype=np.float32), affine)
    raw = path.read_bytes()
    qform_code, sform_code = struct.unpack_from("<2h", raw, 252)
    assert qform_code == 1 and sform_code == 1
    # sform rows carry the affine
    srow = struct.unpack_from("<12f", raw, 280)
    np.testing.assert_allclose(np.array(srow).reshape(3, 4), affine[:3, :], atol=1e-6)


def test_scl_slope_inter_applied(tmp_path):
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    path = tmp_path / "scaled.nii"
    write_nifti(path, data, np.eye(4))
    raw = bytearray(path.read_bytes())
    struct.pack_into("<2f", raw, 112, 2.0, 10.0)  # scl_slope, scl_inter
    path.write_bytes(bytes(raw))
    out, _ = read_nifti(path)
    assert out.dtype == np.float64
    np.testing.assert_allclose(out, data.astype(np.float64) * 2.0 + 10.0)


def test_read_big_endian(tmp_path):
    data = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
    header = bytearray(348)
    struct.pack_into(">i", header, 0, 348)
    struct.pack_into(">8h", header, 40, 3, 3, 3, 3, 1, 1, 1, 1)
    struct.pack_into(">2h", header, 70, 2, 8)  # uint8
    struct.pack_into(">8f", header, 76, 1.0, 2.0, 3.0, 4.0, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into(">f", header, 108, 352.0)
    struct.pack_into(">2h", header, 252, 0, 0)
    struct.pack_into(">4s", header, 344, b"n+1\x00")
    path = tmp_path / "be.nii"
    path.write_bytes(bytes(header) + b"\x00" * 4 + data.tobytes(order="F"))
    out, affine = read_nifti(path)
    np.testing.assert_array_equal(out, data)
    np.testing.assert_allclose(np.diag(affine)[:3], [2.0, 3.0, 4.0])


def test_trailing_singleton_dims_squeezed(tmp_path):
    path = tmp_path / "vol4d.nii"
    write_nifti(path, np.ones((3, 3, 3), dtype=np.float32), np.eye(4))
    raw = bytearray(path.read_bytes())
    struct.pack_into("<8h", raw, 40, 4, 3, 3, 3, 1, 1, 1, 1)  # declare 4D with 1 frame
    path.write_bytes(bytes(raw))
    out, _ = read_nifti(path)
    assert out.shape == (3, 3, 3)


def test_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.nii"
    write_nifti(path, np.zeros((2, 2, 2), dtype=np.float32), np.eye(4))
    raw = bytearray(path.read_bytes())
    struct.pack_into("<4s", raw, 344, b"xxx\x00")
    path.write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError):
        read_nifti(path)


def test_rejects_truncated(tmp_path):
    path = tmp_path / "short.nii"
    write_nifti(path, np.zeros((4, 4, 4), dtype=np.float32), np.eye(4))
    path.write_bytes(path.read_bytes()[:400])
    with pytest.raises(NiftiFormatError):
        read_nifti(path)


def test_rejects_non_nifti(tmp_path):
    path = tmp_path / "junk.nii.gz"
    with gzip.open(path, "wb") as f:
        f.write(b"not a nifti file at all" * 40)
    with pytest.raises(NiftiFormatError):
        read_nifti(path)
