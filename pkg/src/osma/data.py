"""In-memory image sets built from a benchmark manifest."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bench import BenchmarkManifest, load_png
from .errors import DatasetError
from .evalkit import UNKNOWN


@dataclass
class ImageSet:
    images: np.ndarray  # (N, 3, S, S) float32 in [0, 1]
    labels: np.ndarray  # known class id, UNKNOWN for open-set records
    unseen_types: list
    class_names: list
    num_classes: int
    names: list | None = None  # per-record class name

    def __len__(self):
        return len(self.labels)

    def subset(self, mask) -> "ImageSet":
        idx = np.flatnonzero(mask)
        return ImageSet(
            self.images[idx],
            self.labels[idx],
            [self.unseen_types[i] for i in idx],
            self.class_names,
            self.num_classes,
            None if self.names is None else [self.names[i] for i in idx],
        )

    @property
    def closed(self):
        return self.subset(self.labels != UNKNOWN)

    @property
    def open(self):
        return self.subset(self.labels == UNKNOWN)


def load_split(manifest: BenchmarkManifest, split: str, openness: str | None = None) -> ImageSet:
    recs = manifest.select(split=split, openness=openness)
    if not recs:
        raise DatasetError(f"manifest has no {split!r} records")
    images = np.stack([load_png(manifest.root / r.image_path) for r in recs])
    labels = np.array([r.known_class_id if r.known_class_id >= 0 else UNKNOWN for r in recs], dtype=np.int64)
    names = manifest.class_names or [str(i) for i in range(manifest.num_known)]
    return ImageSet(images, labels, [r.unseen_type for r in recs], names, manifest.num_known,
                    [r.class_name for r in recs])
