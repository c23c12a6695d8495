"""Declarative run configuration: one JSON document with sections whose
defaults reproduce the reference hyperparameters, so an empty override
keeps the reference setup."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .augment import AugmentConfig
from .labelset import MappingRegistry, builtin_registry, load_labelset_config
from .losses import LossConfig, default_supervision_weights
from .model import UNetConfig
from .train import TrainConfig

DEVICE_ENV_VAR = "FETALSEG_DEVICE"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    manifest: Path | None = None
    atlas: Path | None = None
    output_dir: Path = Path("output")
    labelset_file: Path | None = None
    unet: UNetConfig = field(default_factory=UNetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    n_members: int = 10
    tta: bool = True
    ensemble_manifest: Path | None = None
    target_spacing: float = 0.8
    dilation_voxels: int = 5

    def registry(self) -> MappingRegistry:
        registry = builtin_registry()
        if self.labelset_file is not None:
            load_labelset_config(self.labelset_file, registry)
        return registry

    def device(self) -> str:
        return os.environ.get(DEVICE_ENV_VAR, "cpu")


def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    return value


def _build(cls, section: dict, name: str, tuple_fields=()):
    kwargs = dict(section)
    for key in tuple_fields:
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad key in config section {name!r}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from exc


def load_run_config(path, overrides: dict | None = None) -> RunConfig:
    """Parse and fully validate a run config file before anything runs."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if overrides:
        raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}

    paths = _section(raw, "paths")
    base = path.parent

    def _path(key):
        value = paths.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base / p

    unet = _build(UNetConfig, _section(raw, "unet"), "unet", tuple_fields=("patch_shape",))
    loss_section = _section(raw, "loss")
    if "deep_supervision_weights" not in loss_section:
        loss_section = {
            **loss_section,
            "deep_supervision_weights": default_supervision_weights(unet.deep_supervision_levels),
        }
    cfg = RunConfig(
        manifest=_path("manifest"),
        atlas=_path("atlas"),
        output_dir=_path("output_dir") or base / "output",
        labelset_file=_path("labelsets"),
        unet=unet,
        train=_build(TrainConfig, _section(raw, "train"), "train"),
        loss=_build(LossConfig, loss_section, "loss", tuple_fields=("deep_supervision_weights",)),
        augment=_build(
            AugmentConfig,
            _section(raw, "augment"),
            "augment",
            tuple_fields=("zoom_range", "rotate_range_deg", "smooth_sigma_range", "gamma_range"),
        ),
        n_members=int(raw.get("n_members", 10)),
        tta=bool(raw.get("tta", True)),
        ensemble_manifest=_path("ensemble_manifest"),
        target_spacing=float(raw.get("target_spacing", 0.8)),
        dilation_voxels=int(raw.get("dilation_voxels", 5)),
    )
    if len(cfg.loss.deep_supervision_weights) != cfg.unet.deep_supervision_levels:
        raise ConfigError(
            "loss.deep_supervision_weights length must equal unet.deep_supervision_levels"
        )
    if cfg.n_members < 1:
        raise ConfigError("n_members must be >= 1")
    for key, p in (("manifest", cfg.manifest), ("atlas", cfg.atlas), ("labelsets", cfg.labelset_file)):
        if p is not None and not Path(p).exists():
            raise ConfigError(f"configured {key} path does not exist: {p}")
    return cfg
