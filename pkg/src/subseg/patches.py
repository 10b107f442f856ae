"""Sliding-window patch planning, probability accumulation, and voting.

Inference walks a 96^3 window over the crop frame (default step 16), sums
each window's softmax output into a per-class accumulator, and argmaxes the
summed mass per voxel. Class indices are mapped to FreeSurfer IDs last.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np

from .errors import (
    IncompatibleDims,
    NonNormalizedProbabilities,
    OffsetOutOfPlan,
    ShapeMismatch,
    UncoveredVoxel,
)
from .labels import NUM_CLASSES, LabelTable
from .volume import PATCH_SIZE, PATCH_STRIDE, Volume, crop_to_content, restore_to_full

PROB_TOL = 1e-4  # per-voxel deviation of channel sums from 1 tolerated at accumulation


def _axis_offsets(dim: int, stride: int) -> list[int]:
    last = dim - PATCH_SIZE
    offs = list(range(0, last + 1, stride))
    if offs[-1] != last:
        offs.append(last)  # snap the final window to the end of the axis
    return offs


@dataclass(frozen=True)
class PatchPlan:
    """Lexicographically ordered 96^3 window corners covering the crop."""

    crop_dims: tuple[int, int, int]
    stride: int = PATCH_STRIDE
    patch_size: int = PATCH_SIZE
    offsets: tuple[tuple[int, int, int], ...] = field(default=(), compare=False)

    def __contains__(self, offset) -> bool:
        return tuple(offset) in set(self.offsets)


def plan_patches(crop_dims, stride: int = PATCH_STRIDE) -> PatchPlan:
    """Enumerate window corners for a crop with dims 96 + 16k per axis.

    For the default stride 16 the offsets per axis are exactly
    {0, 16, ..., D - 96}; coarser strides keep full coverage by snapping the
    final offset to D - 96.
    """
    crop_dims = tuple(int(d) for d in crop_dims)
    if len(crop_dims) != 3:
        raise IncompatibleDims(f"crop dims must be a 3-vector, got {crop_dims}")
    for d in crop_dims:
        if d < PATCH_SIZE or (d - PATCH_SIZE) % PATCH_STRIDE != 0:
            raise IncompatibleDims(
                f"crop dims must satisfy d >= {PATCH_SIZE} and (d - {PATCH_SIZE}) % {PATCH_STRIDE} == 0, got {crop_dims}"
            )
    if not 1 <= stride <= PATCH_SIZE:
        raise IncompatibleDims(f"stride must be in 1..{PATCH_SIZE}, got {stride}")
    per_axis = [_axis_offsets(d, stride) for d in crop_dims]
    offsets = tuple(product(*per_axis))  # lexicographic by construction
    return PatchPlan(crop_dims=crop_dims, stride=stride, offsets=offsets)


def extract_patch(vol: np.ndarray, offset, patch_size: int = PATCH_SIZE) -> np.ndarray:
    """Verbatim copy of the window at a planned offset."""
    offset = tuple(int(o) for o in offset)
    for o, d in zip(offset, vol.shape):
        if o < 0 or o + patch_size > d:
            raise OffsetOutOfPlan(f"offset {offset} puts the window outside the crop {vol.shape}")
    sl = tuple(slice(o, o + patch_size) for o in offset)
    return vol[sl].copy()


class ProbAccumulator:
    """Additive per-class probability mass plus per-voxel coverage counts."""

    def __init__(self, crop_dims, num_classes: int = NUM_CLASSES):
        self.sums = np.zeros((num_classes, *crop_dims), dtype=np.float32)
        self.counts = np.zeros(crop_dims, dtype=np.int32)

    def add(self, offset, probs: np.ndarray, patch_size: int = PATCH_SIZE) -> None:
        """sums[:, window] += probs; counts[window] += 1. Pure addition, order-free."""
        if probs.shape != (self.sums.shape[0], patch_size, patch_size, patch_size):
            raise ShapeMismatch(
                f"expected probs of shape ({self.sums.shape[0]}, {patch_size}^3), got {probs.shape}"
            )
        offset = tuple(int(o) for o in offset)
        for o, d in zip(offset, self.counts.shape):
            if o < 0 or o + patch_size > d:
                raise OffsetOutOfPlan(f"offset {offset} outside accumulator grid {self.counts.shape}")
        voxel_sums = probs.sum(axis=0)
        if np.abs(voxel_sums - 1.0).max() > PROB_TOL:
            worst = float(np.abs(voxel_sums - 1.0).max())
            raise NonNormalizedProbabilities(f"channel sums deviate from 1 by up to {worst:.2e}")
        window = tuple(slice(o, o + patch_size) for o in offset)
        self.sums[(slice(None),) + window] += probs.astype(np.float32)
        self.counts[window] += 1


def accumulate(acc: ProbAccumulator, offset, probs: np.ndarray) -> ProbAccumulator:
    acc.add(offset, probs)
    return acc


def vote(acc: ProbAccumulator) -> np.ndarray:
    """Per-voxel argmax over summed class mass; ties go to the lowest index."""
    if (acc.counts == 0).any():
        n = int((acc.counts == 0).sum())
        raise UncoveredVoxel(f"{n} voxels were never covered by a patch")
    return np.argmax(acc.sums, axis=0).astype(np.int16)


def map_to_freesurfer(class_grid: np.ndarray, table: LabelTable) -> np.ndarray:
    return table.map_classes_to_fs(class_grid)


# predict(patch, offset) -> (num_classes, 96, 96, 96) float array, softmax over axis 0
PatchPredictor = Callable[[np.ndarray, tuple[int, int, int]], np.ndarray]


def segment_volume(
    v: Volume,
    predict: PatchPredictor,
    table: LabelTable,
    stride: int = PATCH_STRIDE,
) -> tuple[Volume, dict]:
    """Full inference pass: crop, patch, predict, vote, relabel, restore.

    The input must already be conformed (RAS 1mm 256^3 in [0, 1]).
    Deterministic for a deterministic predictor. Returns the FreeSurfer-ID
    segmentation and a stats dict (patch count, wall time, crop frame).
    """
    t0 = time.perf_counter()
    crop, frame = crop_to_content(v)
    plan = plan_patches(frame.dims, stride=stride)
    acc = ProbAccumulator(frame.dims)
    for offset in plan.offsets:
        patch = extract_patch(crop, offset)
        probs = predict(patch, offset)
        acc.add(offset, probs)
    class_crop = vote(acc)
    fs_crop = map_to_freesurfer(class_crop, table)
    full = restore_to_full(fs_crop, frame)
    wall = time.perf_counter() - t0
    seg = Volume(full, v.affine.copy(), role="label", label_codomain="freesurfer")
    stats = {
        "num_patches": len(plan.offsets),
        "stride": stride,
        "crop_offset": list(frame.offset),
        "crop_dims": list(frame.dims),
        "wall_time_s": wall,
    }
    return seg, stats
