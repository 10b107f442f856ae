"""Class-index <-> FreeSurfer segmentation ID table.

The network predicts contiguous class indices 0..31; outputs on disk carry
FreeSurfer aseg IDs. The shipped table covers background plus 31 subcortical
regions and is overridable with any tab-separated file of
(class_index, freesurfer_id, region_name) rows.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import UnknownClassIndex

NUM_CLASSES = 32


@dataclass(frozen=True)
class LabelEntry:
    class_index: int
    freesurfer_id: int
    name: str


class LabelTable:
    """Bijection between class indices 0..31 and FreeSurfer IDs."""

    def __init__(self, entries: list[LabelEntry]):
        entries = sorted(entries, key=lambda e: e.class_index)
        if len(entries) != NUM_CLASSES:
            raise ValueError(f"label table needs {NUM_CLASSES} entries, got {len(entries)}")
        if [e.class_index for e in entries] != list(range(NUM_CLASSES)):
            raise ValueError("class indices must be exactly 0..31")
        if entries[0].freesurfer_id != 0:
            raise ValueError("class 0 must map to FreeSurfer ID 0 (background)")
        ids = [e.freesurfer_id for e in entries]
        if len(set(ids)) != NUM_CLASSES:
            raise ValueError("FreeSurfer IDs must be pairwise distinct")
        self.entries = entries
        self._class_to_fs = np.array(ids, dtype=np.int16)
        self._fs_to_class = {fs: i for i, fs in enumerate(ids)}

    @property
    def freesurfer_ids(self) -> np.ndarray:
        return self._class_to_fs.copy()

    def class_to_fs(self, class_index: int) -> int:
        if not 0 <= class_index < NUM_CLASSES:
            raise UnknownClassIndex(f"class index {class_index} outside 0..{NUM_CLASSES - 1}")
        return int(self._class_to_fs[class_index])

    def fs_to_class(self, freesurfer_id: int) -> int:
        try:
            return self._fs_to_class[int(freesurfer_id)]
        except KeyError:
            raise UnknownClassIndex(f"FreeSurfer ID {freesurfer_id} not in table") from None

    def name_of_fs(self, freesurfer_id: int) -> str:
        return self.entries[self.fs_to_class(freesurfer_id)].name

    def map_classes_to_fs(self, class_grid: np.ndarray) -> np.ndarray:
        """Value-wise lookup from class indices to FreeSurfer IDs."""
        if class_grid.size and (class_grid.min() < 0 or class_grid.max() >= NUM_CLASSES):
            bad = class_grid[(class_grid < 0) | (class_grid >= NUM_CLASSES)]
            raise UnknownClassIndex(f"class values outside 0..{NUM_CLASSES - 1}: {np.unique(bad)[:5]}")
        return self._class_to_fs[class_grid.astype(np.int64)]

    def map_fs_to_classes(self, fs_grid: np.ndarray) -> np.ndarray:
        """Inverse lookup; every value must be a table ID."""
        lut = np.full(int(self._class_to_fs.max()) + 1, -1, dtype=np.int16)
        lut[self._class_to_fs] = np.arange(NUM_CLASSES, dtype=np.int16)
        grid = fs_grid.astype(np.int64)
        if grid.size and (grid.min() < 0 or grid.max() >= lut.size):
            raise UnknownClassIndex("FreeSurfer ID outside table range")
        out = lut[grid]
        if (out < 0).any():
            bad = np.unique(fs_grid[(out < 0)])
            raise UnknownClassIndex(f"FreeSurfer IDs not in table: {bad[:5]}")
        return out

    def to_tsv(self) -> str:
        return "".join(f"{e.class_index}\t{e.freesurfer_id}\t{e.name}\n" for e in self.entries)

    def fingerprint(self) -> str:
        """SHA-256 of the canonical TSV serialization; stored in checkpoints."""
        return hashlib.sha256(self.to_tsv().encode()).hexdigest()

    @classmethod
    def from_tsv(cls, text: str) -> "LabelTable":
        entries = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            idx, fs, name = line.split("\t")
            entries.append(LabelEntry(int(idx), int(fs), name))
        return cls(entries)

    @classmethod
    def from_file(cls, path: str | Path) -> "LabelTable":
        return cls.from_tsv(Path(path).read_text())

    @classmethod
    def default(cls) -> "LabelTable":
        text = resources.files("subseg.data").joinpath("freesurfer_labels.tsv").read_text()
        return cls.from_tsv(text)
