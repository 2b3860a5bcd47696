"""INI run configuration: one section per module, command-line flags win.

Recognised sections and keys mirror the config dataclasses::

    [stage]    stage, activation, augmentation_mode, bilinear_signed_sqrt,
               bilinear_l2, input_size, stain_init, train_stain
    [dct]      energy_fraction, replacement_value, log_clamp_floor
    [train]    learning_rate, momentum, weight_decay, batch_size, max_epochs,
               patience, lr_decay, class_weight, precision, eval_batch_size
    [augment]  rotation, hflip, vflip, shear_degrees, blur_sigma

Pairs (``shear_degrees``, ``blur_sigma``, ``class_weight``) are written as
``a, b``.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .data.augment import AugmentConfig
from .dct import DctConfig
from .exceptions import ConfigError
from .models import StageConfig
from .training import TrainConfig

SECTIONS = {
    "stage": StageConfig,
    "dct": DctConfig,
    "train": TrainConfig,
    "augment": AugmentConfig,
}
# Keys owned by another section or by the global flags. Echoed configs carry
# them for the record; reading ignores them.
_SKIP = {"stage": {"dct"}, "train": {"augment", "seed"}, "augment": {"mode"}}
# Record-only sections written by the subcommands; ignored when read back.
RECORD_SECTIONS = {"run", "synth", "split", "preprocess", "eval", "inspect"}


def _field_kinds(section: str) -> dict:
    kinds = {}
    for f in dataclasses.fields(SECTIONS[section]):
        if f.name in _SKIP.get(section, set()):
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        kinds[f.name] = type(default) if default is not None else tuple
    return kinds


def _convert(section: str, key: str, raw: str, kind):
    try:
        if kind is bool:
            value = raw.strip().lower()
            if value in ("1", "true", "yes", "on"):
                return True
            if value in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is tuple:
            if raw.strip().lower() in ("", "none"):
                return None
            return tuple(float(v) for v in raw.split(","))
        return kind(raw.strip())
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.__name__}") from None


def read_config(path) -> dict[str, dict]:
    """Parse an INI file into typed per-section dicts; unknown sections or keys are errors.

    Files echoed by a previous run read back to the same configuration.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with Path(path).open(encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"config {path} does not parse: {exc}".replace("\n", " ")) from exc
    out: dict[str, dict] = {}
    for section in parser.sections():
        if section in RECORD_SECTIONS:
            continue
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
        kinds = _field_kinds(section)
        values = {}
        for key, raw in parser.items(section):
            if key in _SKIP.get(section, set()):
                continue
            if key not in kinds:
                raise ConfigError(f"[{section}] unknown key {key!r}")
            values[key] = _convert(section, key, raw, kinds[key])
        out[section] = values
    return out


def _merge(base: dict, overrides: dict) -> dict:
    return {**base, **{k: v for k, v in overrides.items() if v is not None}}


def make_stage_config(cfg: dict, **overrides) -> StageConfig:
    try:
        dct = DctConfig(**cfg.get("dct", {}))
        return StageConfig(**_merge(cfg.get("stage", {}), overrides), dct=dct)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def make_train_config(cfg: dict, seed: int, augment_mode: str = "none", **overrides) -> TrainConfig:
    try:
        augment = AugmentConfig(**{**cfg.get("augment", {}), "mode": augment_mode})
        return TrainConfig(**_merge(cfg.get("train", {}), overrides), seed=seed, augment=augment)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def echo_config(path, sections: dict[str, dict]) -> Path:
    """Write the effective settings as INI, keys sorted, so reruns diff cleanly."""
    parser = configparser.ConfigParser(interpolation=None)
    for name in sorted(sections):
        parser[name] = {k: _format(v) for k, v in sorted(sections[name].items())}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)
    return path


def effective_sections(stage_cfg: StageConfig | None = None, train_cfg: TrainConfig | None = None, **extra) -> dict:
    out = {}
    if stage_cfg is not None:
        d = stage_cfg.to_dict()
        out["dct"] = d.pop("dct")
        out["stage"] = d
    if train_cfg is not None:
        d = dataclasses.asdict(train_cfg)
        out["augment"] = d.pop("augment")
        out["train"] = d
    for name, values in extra.items():
        out[name] = dict(values)
    return out
