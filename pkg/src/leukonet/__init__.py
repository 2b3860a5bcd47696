"""LeukoNet: stain-deconvolution and DCT bilinear CNNs for leukemic-blast vs normal B-cell images.

Everything runs on a small NumPy reverse-mode autograd core (``leukonet.tensor``).
"""

__version__ = "0.1.0"

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .dct import DctConfig
from .estimators import DctFeatures, HybridClassifier, LeukoNetClassifier, OpticalDensity, SubjectKFold
from .metrics import MetricsReport, f1_score
from .models import StageConfig, build_stage, extract_features
from .tensor import Rng, Tensor, no_grad
from .training import TrainConfig, evaluate, train, train_hybrid

__all__ = [
    "__version__",
    "Checkpoint", "load_checkpoint", "save_checkpoint",
    "DctConfig", "MetricsReport", "f1_score",
    "DctFeatures", "HybridClassifier", "LeukoNetClassifier", "OpticalDensity", "SubjectKFold",
    "StageConfig", "build_stage", "extract_features",
    "Rng", "Tensor", "no_grad",
    "TrainConfig", "evaluate", "train", "train_hybrid",
]
