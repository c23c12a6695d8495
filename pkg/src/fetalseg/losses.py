"""Label-set loss functions for training with partially segmented targets.

Both losses consume per-voxel leaf-class probabilities (class axis first)
and a partial label map whose ids index the label sets of a
LabelSetMapping:

  marginalized cross entropy:  mean_i -log( sum_{c in S(g_i)} p_ic + eps )
  leaf Dice: soft Dice restricted to singleton-annotated voxels in the
  ground-truth terms, squared prediction term in the denominator.

With all-singleton targets they reduce to standard cross entropy and mean
soft Dice. Voxels annotated with the full leaf set behave as unlabeled:
near-zero CE contribution, denominator-only Dice influence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .labelset import LabelSetMapping, marginalization_matrix

NORMALIZATION_TOL = 1e-3


class LossInputError(ValueError):
    pass


def default_supervision_weights(levels: int = 4) -> tuple[float, ...]:
    """Halving weights across scales, normalized to sum to one."""
    raw = [2.0**-s for s in range(levels)]
    total = sum(raw)
    return tuple(w / total for w in raw)


@dataclass(frozen=True)
class LossConfig:
    epsilon_dice: float = 1e-5
    epsilon_log: float = 1e-8
    deep_supervision_weights: tuple[float, ...] = field(
        default_factory=default_supervision_weights
    )

    def __post_init__(self):
        if self.epsilon_dice <= 0 or self.epsilon_log <= 0:
            raise LossInputError("loss epsilons must be positive")
        w = tuple(float(x) for x in self.deep_supervision_weights)
        if any(x < 0 for x in w):
            raise LossInputError("deep supervision weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-9:
            raise LossInputError(f"deep supervision weights must sum to 1, got {sum(w)}")
        object.__setattr__(self, "deep_supervision_weights", w)


@dataclass
class PartialTarget:
    """Per-voxel partial label ids plus the mapping that defines the sets."""

    labels: torch.Tensor  # integer tensor, spatial shape
    mapping: LabelSetMapping

    def __post_init__(self):
        if not torch.is_tensor(self.labels):
            self.labels = torch.as_tensor(np.asarray(self.labels))
        self.labels = self.labels.long()
        if self.labels.numel() and int(self.labels.max()) >= self.mapping.num_partial:
            raise LossInputError(
                f"label id {int(self.labels.max())} out of range for mapping "
                f"{self.mapping.name!r} with K={self.mapping.num_partial}"
            )
        if self.labels.numel() and int(self.labels.min()) < 0:
            raise LossInputError("partial label ids must be non-negative")

    def phi(self, dtype, device) -> torch.Tensor:
        return torch.as_tensor(
            marginalization_matrix(self.mapping).phi, dtype=dtype, device=device
        )

    def singleton_onehot(self, num_classes: int, dtype, device) -> torch.Tensor:
        """(C, *spatial) indicator: voxel annotated with exactly leaf c."""
        out = torch.zeros((num_classes, *self.labels.shape), dtype=dtype, device=device)
        for partial_id, leaf in self.mapping.singleton_leaves().items():
            out[leaf][self.labels == partial_id] = 1
        return out


def _check_probs(p: torch.Tensor, target: PartialTarget) -> None:
    if p.ndim != 4:
        raise LossInputError(f"expected (C, x, y, z) probabilities, got shape {tuple(p.shape)}")
    if tuple(p.shape[1:]) != tuple(target.labels.shape):
        raise LossInputError(
            f"probability grid {tuple(p.shape[1:])} does not match target "
            f"{tuple(target.labels.shape)}"
        )
    if p.shape[0] != target.mapping.protocol.num_classes:
        raise LossInputError(
            f"{p.shape[0]} probability channels for a protocol with "
            f"{target.mapping.protocol.num_classes} classes"
        )
    dev = float((p.sum(dim=0) - 1.0).abs().max().detach())
    if dev > NORMALIZATION_TOL:
        raise LossInputError(f"probabilities not normalized (max deviation {dev:.2e})")


def marginalized_cross_entropy(
    p: torch.Tensor, target: PartialTarget, config: LossConfig | None = None
) -> torch.Tensor:
    """Mean over voxels of -log(probability mass on the annotated set)."""
    config = config or LossConfig()
    _check_probs(p, target)
    phi = target.phi(p.dtype, p.device)
    q = torch.tensordot(phi, p, dims=([1], [0]))  # (K, *spatial)
    q_at_target = q.gather(0, target.labels.unsqueeze(0)).squeeze(0)
    return -(q_at_target + config.epsilon_log).log().mean()


def leaf_dice(
    p: torch.Tensor, target: PartialTarget, config: LossConfig | None = None
) -> torch.Tensor:
    config = config or LossConfig()
    _check_probs(p, target)
    num_classes = p.shape[0]
    g = target.singleton_onehot(num_classes, p.dtype, p.device)
    axes = tuple(range(1, p.ndim))
    intersection = (g * p).sum(dim=axes)
    gt_volume = g.sum(dim=axes)
    pred_sq = (p * p).sum(dim=axes)
    eps = config.epsilon_dice
    per_class = (2 * intersection + eps) / (gt_volume + pred_sq + eps)
    return 1.0 - per_class.mean()


def combined_loss(
    p: torch.Tensor, target: PartialTarget, config: LossConfig | None = None
) -> torch.Tensor:
    config = config or LossConfig()
    return leaf_dice(p, target, config) + marginalized_cross_entropy(p, target, config)


def downsample_target(target: PartialTarget, times: int) -> PartialTarget:
    """Nearest-neighbor target reduction: stride-2 subsampling per level."""
    labels = target.labels
    for _ in range(times):
        labels = labels[::2, ::2, ::2]
    return PartialTarget(labels=labels, mapping=target.mapping)


def deep_supervision_loss(
    outputs: list[torch.Tensor] | tuple[torch.Tensor, ...],
    target: PartialTarget,
    config: LossConfig | None = None,
) -> torch.Tensor:
    """Weighted sum of combined losses across decoder scales."""
    config = config or LossConfig()
    weights = config.deep_supervision_weights
    if len(outputs) != len(weights):
        raise LossInputError(
            f"{len(outputs)} supervision outputs for {len(weights)} weights"
        )
    total = None
    for scale, (w, out) in enumerate(zip(weights, outputs)):
        term = w * combined_loss(out, downsample_target(target, scale), config)
        total = term if total is None else total + term
    return total
