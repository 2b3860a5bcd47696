"""Per-epoch sample plans, including Normal-class oversampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..exceptions import ConfigError
from ..tensor import Rng
from .augment import AugmentConfig
from .manifest import CANCER, NORMAL


@dataclass(frozen=True)
class EpochEntry:
    index: int
    augment: bool


def balance_normal_oversample(labels, target: int | None = None, cfg: AugmentConfig | None = None, rng: Rng | None = None) -> list[EpochEntry]:
    """Epoch list with as many Normal entries as ``target`` (default: the Cancer count).

    Each Normal image appears once, and the shortfall is drawn from the Normal
    pool with replacement. With an already-balanced set the list is the
    identity multiset. Normal entries are marked for augmentation unless the
    mode is 'none'; Cancer entries appear once and are augmented only in
    'full' mode.
    """
    cfg = cfg or AugmentConfig(mode="normal_only")
    rng = rng or Rng(0)
    labels = np.asarray(labels)
    normal = np.flatnonzero(labels == NORMAL)
    cancer = np.flatnonzero(labels == CANCER)
    if len(normal) == 0:
        raise ConfigError("cannot oversample the Normal class: no Normal images")
    target = len(cancer) if target is None else int(target)
    if target < len(normal):
        raise ConfigError(f"oversampling target {target} is below the Normal count {len(normal)}")
    extra = rng.choice(normal, size=target - len(normal), replace=True) if target > len(normal) else np.empty(0, np.int64)
    aug_normal = cfg.mode != "none"
    aug_cancer = cfg.mode == "full"
    entries = [EpochEntry(int(i), aug_cancer) for i in cancer]
    entries += [EpochEntry(int(i), aug_normal) for i in np.concatenate([normal, extra])]
    return entries


def epoch_plan(labels, cfg: AugmentConfig, rng: Rng) -> list[EpochEntry]:
    """Shuffled sample list for one epoch.

    Mode 'none' visits each image once. Modes 'full' and 'normal_only'
    oversample Normal up to the Cancer count first.
    """
    labels = np.asarray(labels)
    if cfg.mode == "none":
        entries = [EpochEntry(i, False) for i in range(len(labels))]
    else:
        n_cancer = int((labels == CANCER).sum())
        target = max(n_cancer, int((labels == NORMAL).sum()))
        entries = balance_normal_oversample(labels, target, cfg, rng.spawn(0))
    order = rng.spawn(1).permutation(len(entries))
    return [entries[i] for i in order]
