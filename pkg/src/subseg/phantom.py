"""Synthetic labeled phantoms: desk-scale ground truth for the pipeline.

Each phantom is a conformed 256^3 pair (intensity in [0, 1], FreeSurfer-ID
labels) with every table region present as an ellipsoid of at least 27
voxels. Regions sit on a jittered lattice, a few nested inside larger hosts,
and each carries a distinct mean intensity plus mild noise so that intensity
correlates with label.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .labels import LabelTable
from .patches import PatchPredictor
from .volume import CONFORM_SHAPE, Volume, crop_to_content

MIN_REGION_VOXELS = 27


@dataclass
class Phantom:
    intensity: Volume
    labels: Volume  # FreeSurfer IDs
    seed: int


def _stamp_ellipsoid(grid: np.ndarray, center, semiaxes, value) -> None:
    lo = np.maximum(np.floor(center - semiaxes).astype(int) - 1, 0)
    hi = np.minimum(np.ceil(center + semiaxes).astype(int) + 2, grid.shape)
    xs = np.arange(lo[0], hi[0])[:, None, None]
    ys = np.arange(lo[1], hi[1])[None, :, None]
    zs = np.arange(lo[2], hi[2])[None, None, :]
    d = (
        ((xs - center[0]) / semiaxes[0]) ** 2
        + ((ys - center[1]) / semiaxes[1]) ** 2
        + ((zs - center[2]) / semiaxes[2]) ** 2
    )
    sub = grid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
    sub[d <= 1.0] = value


def make_phantom(seed: int, table: LabelTable | None = None,
                 layout: tuple[int, int, int] = (5, 4, 2), spacing: float = 22.0) -> Phantom:
    """Deterministic single phantom for a seed.

    layout/spacing set the slot lattice the ellipsoids sit on. The default
    spans a >96-voxel crop (multi-patch inference); layout (4, 4, 2) packs
    all regions into a single 96^3 patch.
    """
    table = table or LabelTable.default()
    rng = np.random.default_rng(seed)
    region_ids = [int(i) for i in table.freesurfer_ids[1:]]
    if np.prod(layout) < len(region_ids) - 3:
        raise ValueError(f"lattice {layout} too small for {len(region_ids)} regions")

    labels = np.zeros(CONFORM_SHAPE, dtype=np.int16)

    base = np.array(CONFORM_SHAPE) / 2.0 - (np.array(layout) - 1) * spacing / 2.0
    base += rng.uniform(-4, 4, size=3)
    slots = [base + spacing * np.array(idx) for idx in np.ndindex(layout)]
    order = rng.permutation(len(slots))

    ids = list(rng.permutation(region_ids))
    nested_children = [ids.pop() for _ in range(3)]  # placed inside the first 3 hosts

    placed = {}
    for k, rid in enumerate(ids):
        center = slots[order[k]] + rng.uniform(-1.5, 1.5, size=3)
        if k < 3:
            semiaxes = rng.uniform(7.0, 9.0, size=3)  # hosts: roomy enough for a child
        else:
            semiaxes = rng.uniform(5.0, 9.0, size=3)
        _stamp_ellipsoid(labels, center, semiaxes, rid)
        placed[rid] = (center, semiaxes)

    for host_rid, child_rid in zip(ids[:3], nested_children):
        center, _ = placed[host_rid]
        child_axes = rng.uniform(2.8, 3.4, size=3)
        _stamp_ellipsoid(labels, center, child_axes, child_rid)

    for rid in region_ids:
        count = int((labels == rid).sum())
        if count < MIN_REGION_VOXELS:  # pragma: no cover - geometry guarantees this
            raise RuntimeError(f"phantom region {rid} has only {count} voxels")

    # distinct mean intensity per region, mild noise, background exactly zero
    intensity = np.zeros(CONFORM_SHAPE, dtype=np.float64)
    for k, rid in enumerate(region_ids):
        mask = labels == rid
        mean = 0.2 + 0.75 * k / max(len(region_ids) - 1, 1)
        vals = mean + rng.normal(0.0, 0.02, size=int(mask.sum()))
        intensity[mask] = np.clip(vals, 0.02, 1.0)

    affine = np.eye(4)
    return Phantom(
        intensity=Volume(intensity, affine, role="intensity"),
        labels=Volume(labels, affine, role="label", label_codomain="freesurfer"),
        seed=seed,
    )


def make_phantoms(num_cases: int, seed: int = 0, table: LabelTable | None = None) -> list[Phantom]:
    table = table or LabelTable.default()
    return [make_phantom(seed + i, table) for i in range(num_cases)]


def oracle_predictor(phantom: Phantom, table: LabelTable) -> PatchPredictor:
    """Predictor that emits the one-hot ground truth of each requested window.

    Uses the same crop frame the inference engine derives from the intensity
    volume, so voting over its outputs must reproduce the labels exactly.
    """
    _, frame = crop_to_content(phantom.intensity)
    class_crop = table.map_fs_to_classes(phantom.labels.data[frame.slices])
    channels = np.arange(32, dtype=np.int16)[:, None, None, None]

    def predict(patch: np.ndarray, offset) -> np.ndarray:
        sl = tuple(slice(o, o + patch.shape[i]) for i, o in enumerate(offset))
        window = class_crop[sl]
        return (window[None, ...] == channels).astype(np.float32)

    return predict
