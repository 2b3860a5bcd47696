"""Subject-level k-fold assignment.

Every image of a subject lands in the same fold, and each fold gets roughly
the global Normal/Cancer mix. Within a class, subjects are shuffled by the
seeded rng, ordered largest-first (stable, so the shuffle breaks ties), and
each goes to the fold currently holding the fewest images of that class.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..exceptions import ConfigError, DataError
from ..tensor import Rng
from .manifest import LABELS, DatasetManifest

logger = logging.getLogger(__name__)

# A subject above this share of its class makes exact balance infeasible.
DOMINANT_SUBJECT_SHARE = 0.35
PROPORTION_TOLERANCE = 0.05


@dataclass(frozen=True)
class FoldAssignment:
    fold_of_subject: dict
    k: int = 4

    def __post_init__(self):
        bad = {s: f for s, f in self.fold_of_subject.items() if not 0 <= f < self.k}
        if bad:
            raise ConfigError(f"fold indices outside 0..{self.k - 1}: {bad}")

    def subjects_in(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_of_subject.items() if f == fold)

    def record_folds(self, manifest: DatasetManifest) -> np.ndarray:
        """Fold index per manifest record; -1 for held-out test records."""
        out = np.full(len(manifest), -1, dtype=np.int64)
        for i, r in enumerate(manifest.records):
            if not r.is_test:
                try:
                    out[i] = self.fold_of_subject[r.subject_id]
                except KeyError:
                    raise DataError(f"subject {r.subject_id} has no fold assignment") from None
        return out


def split_folds(manifest: DatasetManifest, k: int = 4, rng: Rng | None = None) -> FoldAssignment:
    rng = rng or Rng(0)
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    counts = manifest.subject_counts(include_test=False)
    labels = manifest.subject_labels()
    fold_of: dict[str, int] = {}
    for cls, name in enumerate(LABELS):
        subjects = sorted(s for s in counts if labels[s] == cls)
        if len(subjects) < k:
            raise DataError(f"class {name} has {len(subjects)} training subjects, need at least {k}")
        total = sum(counts[s] for s in subjects)
        biggest = max(counts[s] for s in subjects)
        if biggest > DOMINANT_SUBJECT_SHARE * total:
            logger.warning(
                "class %s: one subject holds %.0f%% of the images; fold balance is best-effort",
                name, 100.0 * biggest / total,
            )
        shuffled = [subjects[i] for i in rng.spawn(cls).permutation(len(subjects))]
        ordered = sorted(shuffled, key=lambda s: -counts[s])
        load = np.zeros(k, dtype=np.int64)
        for s in ordered:
            f = int(np.argmin(load))
            fold_of[s] = f
            load[f] += counts[s]
    return FoldAssignment(fold_of, k)


def fold_violations(manifest: DatasetManifest, folds: FoldAssignment, tolerance: float = PROPORTION_TOLERANCE) -> list[str]:
    """Describe every broken assignment invariant; an empty list means valid."""
    problems = []
    train_subjects = set(manifest.subject_counts(include_test=False))
    test_subjects = {r.subject_id for r in manifest.records if r.is_test}
    assigned = set(folds.fold_of_subject)
    if missing := train_subjects - assigned:
        problems.append(f"unassigned subjects: {sorted(missing)}")
    if extra := assigned - train_subjects:
        problems.append(f"assigned subjects not in training set: {sorted(extra)}")
    if leaked := assigned & test_subjects:
        problems.append(f"test subjects assigned to folds: {sorted(leaked)}")

    record_fold = {}
    for r in manifest.records:
        if r.is_test or r.subject_id not in folds.fold_of_subject:
            continue
        f = folds.fold_of_subject[r.subject_id]
        if record_fold.setdefault(r.subject_id, f) != f:
            problems.append(f"subject {r.subject_id} spans folds")

    labels = manifest.labels[~manifest.is_test]
    fold_idx = np.array([folds.fold_of_subject.get(r.subject_id, -1) for r in manifest.records if not r.is_test])
    global_share = labels.mean() if len(labels) else 0.0
    for f in range(folds.k):
        in_fold = labels[fold_idx == f]
        if len(in_fold) == 0:
            problems.append(f"fold {f} is empty")
            continue
        share = in_fold.mean()
        if abs(share - global_share) > tolerance + 1e-12:
            problems.append(f"fold {f} Cancer share {share:.3f} vs global {global_share:.3f}")
    return problems


def write_folds(folds: FoldAssignment, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "fold"])
        for s in sorted(folds.fold_of_subject):
            writer.writerow([s, folds.fold_of_subject[s]])
    return path


def read_folds(path, k: int | None = None) -> FoldAssignment:
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != ("subject_id", "fold"):
                raise DataError(f"{path}: header must be subject_id,fold")
            mapping = {row["subject_id"]: int(row["fold"]) for row in reader}
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read fold file {path}: {exc}") from exc
    if not mapping:
        raise DataError(f"{path}: no fold assignments")
    return FoldAssignment(mapping, k or max(mapping.values()) + 1)
