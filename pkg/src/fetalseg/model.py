"""Configurable 3D encoder-decoder segmentation network with deep supervision.

Block recipe: two (3x3x3 conv -> instance norm -> leaky ReLU 0.01) units per
stage; downsampling by strided convolution (the deepest strided stage is the
bottleneck), upsampling by transposed convolution with skip concatenation.
Feature widths double from base_features and are capped at 320.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

CHECKPOINT_FORMAT_VERSION = 1
FEATURE_CAP = 320


class ModelConfigError(ValueError):
    pass


class CheckpointError(IOError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 8
    base_features: int = 32
    num_resolution_reductions: int = 5
    deep_supervision_levels: int = 4
    patch_shape: tuple[int, int, int] = (128, 160, 128)
    negative_slope: float = 0.01

    def __post_init__(self):
        factor = 2**self.num_resolution_reductions
        if any(s % factor != 0 for s in self.patch_shape):
            raise ModelConfigError(
                f"patch shape {self.patch_shape} not divisible by 2^"
                f"{self.num_resolution_reductions}"
            )
        if self.deep_supervision_levels > self.num_resolution_reductions:
            raise ModelConfigError(
                "deep_supervision_levels must not exceed the decoder depth "
                f"({self.deep_supervision_levels} > {self.num_resolution_reductions})"
            )
        if self.deep_supervision_levels < 1:
            raise ModelConfigError("at least one output level is required")
        if self.base_features < 1 or self.num_classes < 2 or self.in_channels < 1:
            raise ModelConfigError("invalid channel configuration")

    def features_at(self, level: int) -> int:
        return min(self.base_features * 2**level, FEATURE_CAP)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "base_features": self.base_features,
            "num_resolution_reductions": self.num_resolution_reductions,
            "deep_supervision_levels": self.deep_supervision_levels,
            "patch_shape": list(self.patch_shape),
            "negative_slope": self.negative_slope,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(
            in_channels=int(d["in_channels"]),
            num_classes=int(d["num_classes"]),
            base_features=int(d["base_features"]),
            num_resolution_reductions=int(d["num_resolution_reductions"]),
            deep_supervision_levels=int(d["deep_supervision_levels"]),
            patch_shape=tuple(d["patch_shape"]),
            negative_slope=float(d.get("negative_slope", 0.01)),
        )


def _conv_unit(in_ch: int, out_ch: int, stride: int, slope: float) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1),
        nn.InstanceNorm3d(out_ch, affine=True),
        nn.LeakyReLU(slope, inplace=True),
    )


class _Block(nn.Module):
    def __init__(self, in_ch, out_ch, stride, slope):
        super().__init__()
        self.unit1 = _conv_unit(in_ch, out_ch, stride, slope)
        self.unit2 = _conv_unit(out_ch, out_ch, 1, slope)

    def forward(self, x):
        return self.unit2(self.unit1(x))


class _UpBlock(nn.Module):
    def __init__(self, in_ch, out_ch, slope):
        super().__init__()
        self.up = nn.ConvTranspose3d(in_ch, out_ch, kernel_size=2, stride=2)
        self.block = _Block(2 * out_ch, out_ch, 1, slope)

    def forward(self, x, skip):
        x = self.up(x)
        return self.block(torch.cat([x, skip], dim=1))


class Network(nn.Module):
    """3D U-Net; eval mode yields the full-resolution probability map,
    train mode additionally the lower-resolution deep-supervision maps."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        slope = config.negative_slope
        depth = config.num_resolution_reductions

        feats = [config.features_at(l) for l in range(depth + 1)]
        self.input_block = _Block(config.in_channels, feats[0], 1, slope)
        self.down_blocks = nn.ModuleList(
            _Block(feats[l - 1], feats[l], 2, slope) for l in range(1, depth + 1)
        )
        self.up_blocks = nn.ModuleList(
            _UpBlock(feats[l + 1], feats[l], slope) for l in reversed(range(depth))
        )
        self.heads = nn.ModuleList(
            nn.Conv3d(feats[l], config.num_classes, kernel_size=1)
            for l in range(config.deep_supervision_levels)
        )

    def forward(self, x):
        if tuple(x.shape[-3:]) != tuple(self.config.patch_shape):
            raise ModelConfigError(
                f"input spatial shape {tuple(x.shape[-3:])} does not match "
                f"configured patch shape {tuple(self.config.patch_shape)}"
            )
        skips = [self.input_block(x)]
        for block in self.down_blocks:
            skips.append(block(skips[-1]))

        depth = self.config.num_resolution_reductions
        decoder = {}
        y = skips[-1]
        for i, block in enumerate(self.up_blocks):
            level = depth - 1 - i
            y = block(y, skips[level])
            decoder[level] = y

        probs = [
            torch.softmax(self.heads[l](decoder[l]), dim=1)
            for l in range(self.config.deep_supervision_levels)
        ]
        if self.training:
            return probs
        return probs[0]


def _he_init(module: nn.Module, slope: float) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
            nn.init.kaiming_normal_(m.weight, a=slope, nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_network(config: UNetConfig, seed: int) -> Network:
    """Build a network with He-initialized convolutions, deterministically."""
    torch.manual_seed(seed)
    net = Network(config)
    _he_init(net, config.negative_slope)
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


@dataclass
class CheckpointMeta:
    seed: int = 0
    epoch: int = 0
    split_id: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(net: Network, path, meta: CheckpointMeta | None = None) -> None:
    meta = meta or CheckpointMeta()
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": net.config.to_dict(),
        "seed": meta.seed,
        "epoch": meta.epoch,
        "split_id": meta.split_id,
        "extra": meta.extra,
        "state_dict": net.state_dict(),
    }
    torch.save(payload, path)


def load_checkpoint(path, expected_config: UNetConfig | None = None) -> Network:
    """Load a checkpoint; eval-mode outputs reproduce the saved network
    bit-identically. Raises CheckpointError on corruption or config
    mismatch; no partial network escapes."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"not a checkpoint file: {path}")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint format version {payload['format_version']}: {path}"
        )
    config = UNetConfig.from_dict(payload["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError(
            f"checkpoint config does not match the requested config: {path}"
        )
    net = Network(config)
    try:
        net.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint state does not fit its config: {path}") from exc
    net.eval()
    return net


def checkpoint_meta(path) -> CheckpointMeta:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return CheckpointMeta(
        seed=int(payload.get("seed", 0)),
        epoch=int(payload.get("epoch", 0)),
        split_id=str(payload.get("split_id", "")),
        extra=dict(payload.get("extra", {})),
    )
