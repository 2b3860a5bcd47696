"""Manifests, subject-level folds, canvas placement, augmentation and synthetic data."""

from .augment import AugmentConfig, AugmentParams, augment, apply_params, sample_params
from .canvas import CANVAS_SIZE, cell_centroid, center_on_canvas
from .folds import FoldAssignment, fold_violations, read_folds, split_folds, write_folds
from .manifest import (
    CANCER, LABELS, NORMAL, DatasetManifest, ImageSet, Record,
    label_index, load_images, read_image, read_manifest, write_manifest, write_png,
)
from .sampling import EpochEntry, balance_normal_oversample, epoch_plan
from .synth import synth_generate

__all__ = [
    "AugmentConfig", "AugmentParams", "augment", "apply_params", "sample_params",
    "CANVAS_SIZE", "cell_centroid", "center_on_canvas",
    "FoldAssignment", "fold_violations", "read_folds", "split_folds", "write_folds",
    "CANCER", "LABELS", "NORMAL", "DatasetManifest", "ImageSet", "Record",
    "label_index", "load_images", "read_image", "read_manifest", "write_manifest", "write_png",
    "EpochEntry", "balance_normal_oversample", "epoch_plan", "synth_generate",
]
