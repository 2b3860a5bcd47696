"""Subject-tagged image index and in-memory image sets.

Manifest files are UTF-8 CSV with header ``subject_id,label,path,is_test``.
Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..exceptions import DataError

LABELS = ("Normal", "Cancer")
NORMAL, CANCER = 0, 1
MANIFEST_HEADER = ("subject_id", "label", "path", "is_test")


def label_index(label) -> int:
    if isinstance(label, (int, np.integer)) and int(label) in (NORMAL, CANCER):
        return int(label)
    for i, name in enumerate(LABELS):
        if str(label).strip().lower() == name.lower():
            return i
    raise DataError(f"unknown label {label!r}; expected one of {LABELS}")


@dataclass(frozen=True)
class Record:
    subject_id: str
    label: int
    path: str
    is_test: bool = False


@dataclass
class DatasetManifest:
    records: list[Record]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        seen_paths: set[str] = set()
        subject_label: dict[str, int] = {}
        for r in self.records:
            if r.path in seen_paths:
                raise DataError(f"duplicate image path in manifest: {r.path}")
            seen_paths.add(r.path)
            if subject_label.setdefault(r.subject_id, r.label) != r.label:
                raise DataError(f"subject {r.subject_id} carries both labels")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def subjects(self) -> np.ndarray:
        return np.array([r.subject_id for r in self.records])

    @property
    def is_test(self) -> np.ndarray:
        return np.array([r.is_test for r in self.records], dtype=bool)

    def subject_labels(self) -> dict[str, int]:
        return {r.subject_id: r.label for r in self.records}

    def subject_counts(self, include_test: bool = False) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            if r.is_test and not include_test:
                continue
            counts[r.subject_id] = counts.get(r.subject_id, 0) + 1
        return counts

    def resolve(self, record: Record) -> Path:
        p = Path(record.path)
        return p if p.is_absolute() else self.root / p


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
                raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}")
            records = [
                Record(
                    row["subject_id"],
                    label_index(row["label"]),
                    row["path"],
                    row["is_test"].strip().lower() in ("1", "true", "yes"),
                )
                for row in reader
            ]
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return DatasetManifest(records, path.parent)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for r in manifest.records:
            writer.writerow([r.subject_id, LABELS[r.label], r.path, int(r.is_test)])
    return path


def read_image(path) -> np.ndarray:
    """Load a PNG or BMP as a (3, h, w) uint8 array."""
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def write_png(arr: np.ndarray, path) -> Path:
    """Write a (3, h, w) or (h, w) array, clipped to [0, 255], as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    if data.ndim == 3:
        data = data.transpose(1, 2, 0)
    Image.fromarray(data).save(path, format="PNG", optimize=False)
    return path


@dataclass
class ImageSet:
    """Images held in memory as (n, 3, h, w) uint8 with labels and subject ids."""

    images: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects)
        if not (len(self.images) == len(self.labels) == len(self.subjects)):
            raise DataError("images, labels and subjects differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> "ImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(self.images[idx], self.labels[idx], self.subjects[idx])


def load_images(manifest: DatasetManifest, which: str = "all") -> ImageSet:
    """Read the manifest's images; ``which`` is 'all', 'train' (non-test) or 'test'."""
    keep = {
        "all": lambda r: True,
        "train": lambda r: not r.is_test,
        "test": lambda r: r.is_test,
    }[which]
    records = [r for r in manifest.records if keep(r)]
    if not records:
        raise DataError(f"manifest has no {which} records")
    images = [read_image(manifest.resolve(r)) for r in records]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise DataError(f"images differ in size ({sorted(shapes)[:3]}); run preprocess first")
    return ImageSet(np.stack(images), [r.label for r in records], [r.subject_id for r in records])
