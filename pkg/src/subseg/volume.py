"""Volume canonicalization: conform to RAS 1mm 256^3, rescale, crop, restore.

All grids use the voxel-center convention: voxel index i sits at world
position affine @ (i, 1). Conformed volumes are axis-aligned RAS with 1 mm
isotropic spacing and shape 256^3, intensities rescaled to [0, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import affine_transform

from . import nifti
from .errors import (
    ConstantIntensity,
    EmptyVolume,
    FrameOutOfBounds,
    IncompatibleDims,
    InvalidOrientationCode,
    NonPositiveSpacing,
    ShapeMismatch,
)

CONFORM_SHAPE = (256, 256, 256)
CONFORM_SPACING = 1.0
PATCH_SIZE = 96
PATCH_STRIDE = 16

_AXIS_LETTERS = {0: ("R", "L"), 1: ("A", "P"), 2: ("S", "I")}
_LETTER_TO_VEC = {
    "R": (0, 1), "L": (0, -1),
    "A": (1, 1), "P": (1, -1),
    "S": (2, 1), "I": (2, -1),
}


def axcodes_to_matrix(code: str) -> np.ndarray:
    """3x3 signed permutation whose column j is the world direction of voxel axis j."""
    code = code.upper()
    if len(code) != 3 or any(c not in _LETTER_TO_VEC for c in code):
        raise InvalidOrientationCode(f"bad orientation code {code!r}")
    axes = [_LETTER_TO_VEC[c][0] for c in code]
    if sorted(axes) != [0, 1, 2]:
        raise InvalidOrientationCode(f"orientation {code!r} does not span all three axes")
    m = np.zeros((3, 3))
    for j, c in enumerate(code):
        axis, sign = _LETTER_TO_VEC[c]
        m[axis, j] = sign
    return m


def matrix_to_axcodes(linear: np.ndarray) -> str:
    """Nearest signed-permutation orientation code of a 3x3 direction matrix."""
    code = []
    for j in range(3):
        col = linear[:, j]
        axis = int(np.argmax(np.abs(col)))
        pos, neg = _AXIS_LETTERS[axis]
        code.append(pos if col[axis] >= 0 else neg)
    if sorted(_LETTER_TO_VEC[c][0] for c in code) != [0, 1, 2]:
        raise InvalidOrientationCode(f"direction matrix has no dominant axis permutation:\n{linear}")
    return "".join(code)


@dataclass
class Volume:
    """3D scalar grid plus voxel->world affine.

    role is "intensity" or "label"; label grids additionally track whether
    values are FreeSurfer IDs or contiguous class indices (label_codomain).
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    role: str = "intensity"
    label_codomain: str | None = None  # "freesurfer" | "class_index" for role="label"

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.affine = np.asarray(self.affine, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ShapeMismatch(f"volume data must be 3D, got shape {self.data.shape}")
        if self.affine.shape != (4, 4):
            raise ShapeMismatch("affine must be 4x4")
        if self.role not in ("intensity", "label"):
            raise ValueError(f"role must be intensity|label, got {self.role!r}")
        if (self.spacing <= 0).any():
            raise NonPositiveSpacing(f"voxel spacing must be positive, got {self.spacing}")
        self.orientation  # validates the direction matrix

    @property
    def spacing(self) -> np.ndarray:
        return np.sqrt((self.affine[:3, :3] ** 2).sum(axis=0))

    @property
    def orientation(self) -> str:
        return matrix_to_axcodes(self.affine[:3, :3])

    @property
    def origin(self) -> np.ndarray:
        return self.affine[:3, 3].copy()

    @classmethod
    def from_axes(cls, data, spacing, orientation: str, origin=(0.0, 0.0, 0.0), role="intensity",
                  label_codomain=None) -> "Volume":
        spacing = np.asarray(spacing, dtype=np.float64)
        if spacing.shape != (3,) or (spacing <= 0).any():
            raise NonPositiveSpacing(f"spacing must be 3 positive values, got {spacing}")
        affine = np.eye(4)
        affine[:3, :3] = axcodes_to_matrix(orientation) * spacing
        affine[:3, 3] = origin
        return cls(data, affine, role=role, label_codomain=label_codomain)

    def is_conformed_grid(self, tol: float = 1e-5) -> bool:
        """RAS, 1 mm isotropic, 256^3 — the geometry conform produces."""
        return (
            self.data.shape == CONFORM_SHAPE
            and np.allclose(self.affine[:3, :3], np.eye(3), atol=tol)
        )


@dataclass(frozen=True)
class CropFrame:
    """Maps a crop subvolume back into conformed 256^3 space."""

    offset: tuple[int, int, int]
    dims: tuple[int, int, int]

    def __post_init__(self):
        for axis, (off, dim) in enumerate(zip(self.offset, self.dims)):
            if dim < PATCH_SIZE or (dim - PATCH_SIZE) % PATCH_STRIDE != 0:
                raise IncompatibleDims(
                    f"crop dims must be >= {PATCH_SIZE} with (d - {PATCH_SIZE}) % {PATCH_STRIDE} == 0, got {self.dims}"
                )
            if off < 0 or off + dim > CONFORM_SHAPE[axis]:
                raise FrameOutOfBounds(f"frame {self.offset}+{self.dims} exceeds the 256^3 grid")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + d) for o, d in zip(self.offset, self.dims))


def rescale_intensity(data: np.ndarray) -> np.ndarray:
    """Min-max rescale over nonzero voxels to [0, 1]; zeros stay zero.

    x' = (x - m) / (M - m) clipped to [0, 1] with m, M the min/max over
    nonzero (brain) voxels; exact zeros are background and are left at 0.
    """
    data = np.asarray(data, dtype=np.float64)
    nonzero = data != 0
    if not nonzero.any():
        raise ConstantIntensity("no nonzero voxels to rescale")
    m = data[nonzero].min()
    big = data[nonzero].max()
    if big == m:
        raise ConstantIntensity(f"all nonzero voxels equal {m}; rescale undefined")
    out = np.clip((data - m) / (big - m), 0.0, 1.0)
    out[~nonzero] = 0.0
    return out


def _intensity_centroid(data: np.ndarray) -> np.ndarray:
    w = np.clip(data, 0, None).astype(np.float64)
    total = w.sum()
    if total == 0:
        raise EmptyVolume("cannot center a volume with no positive intensity")
    coords = [np.arange(n, dtype=np.float64) for n in data.shape]
    cx = (w.sum(axis=(1, 2)) * coords[0]).sum() / total
    cy = (w.sum(axis=(0, 2)) * coords[1]).sum() / total
    cz = (w.sum(axis=(0, 1)) * coords[2]).sum() / total
    return np.array([cx, cy, cz])


def conform(v: Volume) -> tuple[Volume, dict]:
    """Resample an intensity volume to RAS, 1 mm isotropic, 256^3, [0, 1].

    The brain content is centered via its intensity centroid, with the grid
    translation snapped to the source voxel lattice so that pure axis
    flips/permutations resample losslessly. Trilinear interpolation.
    Already-conformed grids pass through unchanged (conform is idempotent);
    intensities already inside [0, 1] are not re-stretched.

    Returns the conformed volume and a resample report (applied affines and
    rescale bounds).
    """
    if v.role != "intensity":
        raise ValueError("conform expects an intensity volume")
    if not (v.data != 0).any():
        raise EmptyVolume("conform: volume is all zeros")

    report = {
        "input": {
            "shape": list(v.data.shape),
            "spacing": [float(s) for s in v.spacing],
            "orientation": v.orientation,
            "origin": [float(x) for x in v.origin],
        },
        "output": {
            "shape": list(CONFORM_SHAPE),
            "spacing": [CONFORM_SPACING] * 3,
            "orientation": "RAS",
        },
    }

    if v.is_conformed_grid():
        data = v.data.astype(np.float64)
        out_affine = v.affine.copy()
        report["identity"] = True
        report["vox_to_vox"] = np.eye(4).tolist()
    else:
        src_inv = np.linalg.inv(v.affine)
        centroid_vox = _intensity_centroid(v.data)
        centroid_world = v.affine[:3, :3] @ centroid_vox + v.affine[:3, 3]
        center_idx = (np.array(CONFORM_SHAPE) - 1) / 2.0
        t_out = centroid_world - center_idx * CONFORM_SPACING
        # snap the grid origin onto the source voxel lattice
        p0 = src_inv[:3, :3] @ t_out + src_inv[:3, 3]
        p0 = np.round(p0)
        t_out = v.affine[:3, :3] @ p0 + v.affine[:3, 3]

        out_affine = np.eye(4)
        out_affine[:3, 3] = t_out
        matrix = src_inv[:3, :3]  # output voxel -> input voxel (1 mm RAS output axes)
        data = affine_transform(
            v.data.astype(np.float64), matrix, offset=p0,
            output_shape=CONFORM_SHAPE, order=1, mode="constant", cval=0.0,
        )
        vox_to_vox = np.eye(4)
        vox_to_vox[:3, :3] = matrix
        vox_to_vox[:3, 3] = p0
        report["identity"] = False
        report["vox_to_vox"] = vox_to_vox.tolist()

    report["output_affine"] = out_affine.tolist()

    if data.min() >= 0.0 and data.max() <= 1.0 and (data != 0).any():
        report["rescale"] = None
    else:
        nonzero = data[data != 0]
        report["rescale"] = {"source_min": float(nonzero.min()), "source_max": float(nonzero.max())}
        data = rescale_intensity(data)

    return Volume(data, out_affine, role="intensity"), report


def _padded_dim(extent: int) -> int:
    if extent <= PATCH_SIZE:
        return PATCH_SIZE
    return PATCH_SIZE + PATCH_STRIDE * int(np.ceil((extent - PATCH_SIZE) / PATCH_STRIDE))


def crop_to_content(v: Volume) -> tuple[np.ndarray, CropFrame]:
    """Extract the nonzero bounding box, padded per axis to 96 + 16k voxels.

    Padding is symmetric (extra voxel to the high side), shifted inward when
    the box touches the grid edge. The returned frame maps subvolume (0,0,0)
    back to conformed coordinates.
    """
    if v.data.shape != CONFORM_SHAPE:
        raise ShapeMismatch(f"crop_to_content expects a {CONFORM_SHAPE} grid, got {v.data.shape}")
    nz = np.nonzero(v.data)
    if len(nz[0]) == 0:
        raise EmptyVolume("crop_to_content: volume is all zeros")
    offset = []
    dims = []
    for axis in range(3):
        lo = int(nz[axis].min())
        hi = int(nz[axis].max())
        extent = hi - lo + 1
        d = _padded_dim(extent)
        pad_lo = (d - extent) // 2
        start = lo - pad_lo
        start = min(max(start, 0), CONFORM_SHAPE[axis] - d)
        offset.append(start)
        dims.append(d)
    frame = CropFrame(tuple(offset), tuple(dims))
    sub = v.data[frame.slices].copy()
    return sub, frame


def restore_to_full(labels: np.ndarray, frame: CropFrame) -> np.ndarray:
    """Place a cropped label grid back into a zero-filled 256^3 volume."""
    labels = np.asarray(labels)
    if labels.shape != frame.dims:
        raise ShapeMismatch(f"label grid {labels.shape} does not match frame dims {frame.dims}")
    out = np.zeros(CONFORM_SHAPE, dtype=labels.dtype)
    out[frame.slices] = labels
    return out


def load_volume(path, role: str = "intensity", label_codomain: str | None = None) -> Volume:
    data, affine = nifti.read_nifti(path)
    if role == "label":
        data = np.rint(np.asarray(data)).astype(np.int16)
        label_codomain = label_codomain or "freesurfer"
    return Volume(data, affine, role=role, label_codomain=label_codomain)


def save_volume(path, v: Volume, dtype=None, descrip: str = "") -> None:
    if dtype is None:
        dtype = np.int16 if v.role == "label" else np.float32
    nifti.write_nifti(path, v.data, v.affine, dtype=dtype, descrip=descrip)
