"""Basic Network and the staged pipelines built on it.

    S1   RGB -> SD layer -> BasicNetwork(3)
    S2   RGB -> SD layer -> DCT layer -> BasicNetwork(3)
    S2C  RGB -> SD layer -> [quantities | DCT(quantities)] -> BasicNetwork(6)
    S3   frozen S1 + frozen S2 features -> Linear
    S3C  frozen S1 + frozen S2C features -> Linear
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .dct import DctConfig, DctLayer
from .exceptions import ConfigError, ContractError, ShapeError
from .nn import ACTIVATIONS, Activation, BatchNorm2d, BilinearPool, Conv2d, Linear, MaxPool2d, Module, as_input
from .stain import STAIN_SCHEMES, StainDeconvolution
from .tensor import Rng, Tensor, concatenate, no_grad

STAGES = ("S1", "S2", "S2C", "S3", "S3C")
HYBRID_COMPONENTS = {"S3": ("S1", "S2"), "S3C": ("S1", "S2C")}
AUGMENTATION_MODES = ("none", "full", "normal_only")

STEM_CHANNELS = 16
BLOCK_CHANNELS = (32, 64, 64, 128, 128)
POOL_AFTER = (True, True, True, False, True)


@dataclass
class StageConfig:
    """Which pipeline variant to build and how."""

    stage: str = "S1"
    activation: str = "relu"
    augmentation_mode: str = "none"
    bilinear_signed_sqrt: bool = True
    bilinear_l2: bool = True
    input_size: int = 350
    stain_init: str = "standard"
    train_stain: bool = True
    dct: DctConfig = field(default_factory=DctConfig)

    def __post_init__(self):
        self.stage = self.stage.upper()
        self.activation = self.activation.lower().replace("-", "")
        if isinstance(self.dct, dict):
            self.dct = DctConfig(**self.dct)
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; choose from {STAGES}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; choose from {ACTIVATIONS}")
        if self.augmentation_mode not in AUGMENTATION_MODES:
            raise ConfigError(f"unknown augmentation mode {self.augmentation_mode!r}")
        if self.stain_init not in STAIN_SCHEMES:
            raise ConfigError(f"unknown stain init {self.stain_init!r}; choose from {STAIN_SCHEMES}")
        if self.input_size < 32:
            raise ConfigError(f"input_size must be >= 32, got {self.input_size}")

    @property
    def in_channels(self) -> int:
        return 6 if self.stage == "S2C" else 3

    @property
    def is_hybrid(self) -> bool:
        return self.stage in HYBRID_COMPONENTS

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class BasicNetwork(Module):
    """Strided stem conv, five conv/BN/activation blocks, bilinear head, 2 logits."""

    def __init__(self, in_channels: int, cfg: StageConfig, rng: Rng):
        super().__init__()
        if in_channels not in (3, 6):
            raise ConfigError(f"BasicNetwork supports 3 or 6 input channels, got {in_channels}")
        # Layers run channels-last internally; forward() takes and features() reads NCHW input.
        self.stem = Conv2d(in_channels, STEM_CHANNELS, 5, stride=2, padding=2, rng=rng.spawn(0), channels_last=True)
        self.convs, self.norms, self.acts, self.pools = [], [], [], []
        prev = STEM_CHANNELS
        for i, (width, pool) in enumerate(zip(BLOCK_CHANNELS, POOL_AFTER)):
            self.convs.append(Conv2d(prev, width, 3, padding=1, rng=rng.spawn(i + 1), channels_last=True))
            self.norms.append(BatchNorm2d(width, channels_last=True))
            self.acts.append(Activation(cfg.activation, width, axis=-1))
            self.pools.append(MaxPool2d(2, channels_last=True) if pool else None)
            prev = width
        self.feature_channels = prev
        self.pool = BilinearPool(cfg.bilinear_signed_sqrt, cfg.bilinear_l2, channels_last=True)
        self.head = Linear(prev * prev, 2, rng=rng.spawn(99))

    @property
    def feature_dim(self) -> int:
        return self.feature_channels**2

    def features(self, x: Tensor) -> Tensor:
        if x.ndim != 4:
            raise ShapeError(f"BasicNetwork expects NCHW input, got shape {x.shape}")
        x = self.stem(x.transpose(0, 2, 3, 1))
        for conv, norm, act, pool in zip(self.convs, self.norms, self.acts, self.pools):
            x = act(norm(conv(x)))
            if pool is not None:
                x = pool(x)
        return self.pool(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.head(self.features(x))


def build_basic_network(in_channels: int, cfg: StageConfig, rng: Rng) -> BasicNetwork:
    return BasicNetwork(in_channels, cfg, rng)


class StageModel(Module):
    """Single-network stage (S1, S2 or S2C) taking byte-range RGB input."""

    def __init__(self, cfg: StageConfig, rng: Rng):
        super().__init__()
        if cfg.is_hybrid:
            raise ConfigError(f"{cfg.stage} is a hybrid stage; use HybridModel")
        self.config = cfg
        self.sd = StainDeconvolution(cfg.stain_init, rng.spawn(1), trainable=cfg.train_stain)
        self.dct = DctLayer(cfg.dct) if cfg.stage in ("S2", "S2C") else None
        self.net = BasicNetwork(cfg.in_channels, cfg, rng.spawn(2))

    @property
    def stage(self) -> str:
        return self.config.stage

    @property
    def feature_dim(self) -> int:
        return self.net.feature_dim

    def network_input(self, rgb) -> Tensor:
        q = self.sd(as_input(rgb))
        if self.config.stage == "S1":
            return q
        if self.config.stage == "S2":
            return self.dct(q)
        return concatenate([q, self.dct(q)], axis=1)

    def features(self, rgb) -> Tensor:
        return self.net.features(self.network_input(rgb))

    def forward(self, rgb) -> Tensor:
        return self.net.head(self.features(rgb))


class HybridModel(Module):
    """Two frozen component stages whose bilinear features feed one new linear layer."""

    def __init__(self, cfg: StageConfig, first: StageModel, second: StageModel, rng: Rng):
        super().__init__()
        if not cfg.is_hybrid:
            raise ConfigError(f"{cfg.stage} is not a hybrid stage")
        expected = HYBRID_COMPONENTS[cfg.stage]
        got = (first.stage, second.stage)
        if got != expected:
            raise ConfigError(f"{cfg.stage} needs components {expected[0]} and {expected[1]}, got {got[0]} and {got[1]}")
        self.config = cfg
        self.first = first.freeze()
        self.second = second.freeze()
        self.fusion = Linear(first.feature_dim + second.feature_dim, 2, rng=rng.spawn(3))

    @property
    def stage(self) -> str:
        return self.config.stage

    @property
    def feature_dim(self) -> int:
        return self.first.feature_dim + self.second.feature_dim

    def component_features(self, rgb) -> Tensor:
        x = as_input(rgb)
        with no_grad():
            a = self.first.features(x)
            b = self.second.features(x)
        return concatenate([a, b], axis=1)

    def features(self, rgb) -> Tensor:
        return self.component_features(rgb)

    def forward(self, rgb) -> Tensor:
        return self.fusion(self.component_features(rgb))


def build_stage(cfg: StageConfig, checkpoints=None, rng: Rng | None = None) -> Module:
    """Construct the model for ``cfg``.

    Hybrid stages need ``checkpoints``: a pair of component checkpoints
    (``Checkpoint`` objects or paths), in the order given by
    ``HYBRID_COMPONENTS``.
    """
    from .checkpoint import Checkpoint, load_checkpoint

    rng = rng or Rng(0)
    if not cfg.is_hybrid:
        return StageModel(cfg, rng)
    if checkpoints is None or len(checkpoints) != 2:
        a, b = HYBRID_COMPONENTS[cfg.stage]
        raise ConfigError(f"{cfg.stage} requires two component checkpoints ({a} and {b})")
    components = []
    for ckpt in checkpoints:
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        components.append(ckpt.build_model())
    for model in components:
        if isinstance(model, HybridModel):
            raise ConfigError(f"hybrid components must be single stages, got {model.stage}")
    return HybridModel(cfg, components[0], components[1], rng)


def extract_features(model: Module, batch) -> Tensor:
    """Post-bilinear, pre-classifier feature vectors of an eval-mode model."""
    if model.training:
        raise ContractError("extract_features needs an eval-mode model; call model.eval() first")
    with no_grad():
        return model.features(batch)


def parameter_digest(model: Module, prefix: str = "") -> str:
    """SHA-256 over the named parameters (and buffers) starting with ``prefix``."""
    h = hashlib.sha256()
    for name, value in model.state_dict().items():
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(np.ascontiguousarray(value, dtype=np.float64).tobytes())
    return h.hexdigest()
