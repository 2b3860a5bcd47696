"""scikit-learn compatible wrappers.

``LeukoNetClassifier`` trains one stage (S1, S2 or S2C) on image arrays;
``HybridClassifier`` fuses two fitted classifiers; ``OpticalDensity`` and
``DctFeatures`` expose the fixed transforms; ``SubjectKFold`` yields
subject-level folds for ``cross_val_score`` and friends.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_groups, check_images, check_labels
from .data.augment import AugmentConfig
from .data.folds import split_folds
from .data.manifest import DatasetManifest, ImageSet, Record
from .dct import DctConfig, dct_layer_forward
from .exceptions import ConfigError
from .models import StageConfig, extract_features
from .stain import rgb_to_od
from .tensor import Rng, Tensor, default_dtype, no_grad
from .training import TrainConfig, train, train_hybrid


def _pseudo_manifest(labels: np.ndarray, groups: np.ndarray) -> DatasetManifest:
    return DatasetManifest([Record(str(g), int(y), f"{i}", False) for i, (y, g) in enumerate(zip(labels, groups))])


class SubjectKFold:
    """k folds with every subject in exactly one fold and per-fold class balance."""

    def __init__(self, n_splits: int = 4, random_state: int = 0):
        self.n_splits = n_splits
        self.random_state = random_state

    def get_n_splits(self, X=None, y=None, groups=None) -> int:
        return self.n_splits

    def split(self, X, y, groups=None):
        y = np.asarray(y)
        groups = check_groups(groups, len(y))
        folds = split_folds(_pseudo_manifest(y, groups), self.n_splits, Rng(self.random_state))
        fold_of = np.array([folds.fold_of_subject[g] for g in groups])
        for f in range(self.n_splits):
            yield np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)


class _NetworkPredictor(ClassifierMixin, BaseEstimator):
    def _logits(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_images(X)
        with default_dtype(self.precision), no_grad():
            return np.concatenate([self.model_(Tensor(X[i : i + 100])).data for i in range(0, len(X), 100)]).astype(np.float64)

    def decision_function(self, X) -> np.ndarray:
        z = self._logits(X)
        return z[:, 1] - z[:, 0]

    def predict_proba(self, X) -> np.ndarray:
        z = self._logits(X)
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        z = self._logits(X)
        return self.classes_[(z[:, 1] > z[:, 0]).astype(int)]

    def transform(self, X) -> np.ndarray:
        """Post-bilinear feature vectors (the classifier input)."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        with default_dtype(self.precision):
            return np.concatenate([extract_features(self.model_, X[i : i + 100]).data for i in range(0, len(X), 100)])

    def _fit_common(self, X, y, groups):
        X = check_images(X)
        y = check_labels(y, len(X))
        groups = check_groups(groups, len(X))
        folds = split_folds(_pseudo_manifest(y, groups), self.n_folds, Rng(self.random_state))
        return ImageSet(X, y, groups), folds

    def _train_config(self, mode: str) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate, momentum=self.momentum, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience, seed=self.random_state,
            precision=self.precision, augment=AugmentConfig(mode=mode),
        )

    def _finish(self, result):
        self.model_ = result.checkpoint.build_model().astype(self.precision)
        self.classes_ = np.array([0, 1])
        self.history_ = result.log
        self.best_val_accuracy_ = result.best_accuracy
        self.checkpoint_ = result.checkpoint
        return self


class LeukoNetClassifier(_NetworkPredictor):
    """One single-network stage trained with subject-level validation.

    ``groups`` (subject ids) passed to ``fit`` keep each subject's images
    within one fold; ``val_fold`` picks the fold used for checkpoint
    selection.
    """

    def __init__(
        self,
        stage="S1",
        activation="relu",
        augmentation_mode="none",
        learning_rate=1e-2,
        momentum=0.9,
        batch_size=32,
        max_epochs=30,
        patience=6,
        n_folds=4,
        val_fold=0,
        precision="float32",
        random_state=0,
    ):
        self.stage = stage
        self.activation = activation
        self.augmentation_mode = augmentation_mode
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.n_folds = n_folds
        self.val_fold = val_fold
        self.precision = precision
        self.random_state = random_state

    def stage_config(self, input_size: int) -> StageConfig:
        return StageConfig(stage=self.stage, activation=self.activation, augmentation_mode=self.augmentation_mode, input_size=input_size)

    def fit(self, X, y, groups=None):
        data, folds = self._fit_common(X, y, groups)
        cfg = self.stage_config(data.images.shape[-1])
        return self._finish(train(cfg, self._train_config(cfg.augmentation_mode), data, folds, self.val_fold))


class HybridClassifier(_NetworkPredictor):
    """Fusion layer over two fitted ``LeukoNetClassifier`` instances (S1 + S2 or S1 + S2C)."""

    def __init__(self, first=None, second=None, learning_rate=1e-2, momentum=0.9, batch_size=32,
                 max_epochs=30, patience=6, n_folds=4, val_fold=0, precision="float32", random_state=0):
        self.first = first
        self.second = second
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.n_folds = n_folds
        self.val_fold = val_fold
        self.precision = precision
        self.random_state = random_state

    def fit(self, X, y, groups=None):
        for est in (self.first, self.second):
            check_is_fitted(est, "model_")
        second = self.second.checkpoint_.stage
        if second not in ("S2", "S2C"):
            raise ConfigError(f"the second component must be an S2 or S2C classifier, got {second}")
        data, folds = self._fit_common(X, y, groups)
        cfg = StageConfig(stage={"S2": "S3", "S2C": "S3C"}[second], input_size=data.images.shape[-1])
        ckpts = [self.first.checkpoint_, self.second.checkpoint_]
        return self._finish(train_hybrid(cfg, ckpts, self._train_config("none"), data, folds, self.val_fold))


class OpticalDensity(TransformerMixin, BaseEstimator):
    """Stateless RGB -> optical density map."""

    def fit(self, X, y=None):
        check_images(X)
        return self

    def transform(self, X) -> np.ndarray:
        return rgb_to_od(check_images(X)).data

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags


class DctFeatures(TransformerMixin, BaseEstimator):
    """Per-channel DCT, energy thresholding and signed log of (n, c, h, w) planes, flattened."""

    def __init__(self, energy_fraction=0.95, replacement_value=1.0, log_clamp_floor=1.0, flatten=True):
        self.energy_fraction = energy_fraction
        self.replacement_value = replacement_value
        self.log_clamp_floor = log_clamp_floor
        self.flatten = flatten

    def fit(self, X, y=None):
        DctConfig(self.energy_fraction, self.replacement_value, self.log_clamp_floor)
        return self

    def transform(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[:, None]
        cfg = DctConfig(self.energy_fraction, self.replacement_value, self.log_clamp_floor)
        with no_grad():
            out = dct_layer_forward(Tensor(X, dtype=np.float64), cfg).data
        return out.reshape(len(out), -1) if self.flatten else out

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
