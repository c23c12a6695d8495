"""Test-time augmentation, ensembling, post-processing to native space,
and Dice evaluation."""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .labelset import LabelProtocol
from .model import CheckpointError, Network, load_checkpoint
from .preprocess import PatchGeometry
from .transforms import warp_array_channels
from .volume_io import LabelVolume, Volume3D, geometry_matches

FLIP_COMBINATIONS = tuple(
    tuple(axes) for r in range(4) for axes in itertools.combinations((0, 1, 2), r)
)


class InferenceError(ValueError):
    pass


@dataclass
class EnsembleManifest:
    checkpoints: list[Path]
    seeds: list[int] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.checkpoints:
            raise InferenceError("ensemble manifest has no valid members")

    @classmethod
    def load(cls, path) -> "EnsembleManifest":
        path = Path(path)
        if not path.exists():
            raise InferenceError(f"ensemble manifest not found: {path}")
        with open(path) as f:
            data = json.load(f)
        ok = [m for m in data.get("members", []) if m.get("status", "ok") == "ok"]
        if not ok:
            raise InferenceError(f"ensemble manifest lists no valid members: {path}")
        base = path.parent
        ckpts = []
        for m in ok:
            p = Path(m["checkpoint"])
            ckpts.append(p if p.is_absolute() else base / p)
        return cls(
            checkpoints=ckpts,
            seeds=[int(m.get("seed", 0)) for m in ok],
            meta={k: v for k, v in data.items() if k != "members"},
        )

    def load_networks(self) -> list[Network]:
        nets = []
        for p in self.checkpoints:
            try:
                nets.append(load_checkpoint(p))
            except CheckpointError as exc:
                raise InferenceError(f"ensemble member {p} unusable: {exc}") from exc
        first = nets[0].config
        for net, p in zip(nets, self.checkpoints):
            if (
                net.config.num_classes != first.num_classes
                or net.config.patch_shape != first.patch_shape
            ):
                raise InferenceError(
                    f"ensemble member {p} disagrees on num_classes/patch_shape"
                )
        return nets


def _forward_probs(net: Network, patch: torch.Tensor) -> torch.Tensor:
    out = net(patch.unsqueeze(0).unsqueeze(0))
    if isinstance(out, (list, tuple)):  # train mode: full-resolution head
        out = out[0]
    return out[0]


def tta_predict(net: Network, patch: np.ndarray | torch.Tensor, enabled: bool = True) -> np.ndarray:
    """Average the 8 axis-flip predictions, each mapped back through its
    own inverse flip. With TTA disabled this is a single forward pass."""
    was_training = net.training
    net.eval()
    x = torch.as_tensor(np.ascontiguousarray(patch), dtype=torch.float32)
    combos = FLIP_COMBINATIONS if enabled else ((),)
    with torch.no_grad():
        total = None
        for axes in combos:
            spatial = tuple(a + 1 for a in axes)  # class axis first in outputs
            flipped = torch.flip(x, dims=axes) if axes else x
            probs = _forward_probs(net, flipped)
            if axes:
                probs = torch.flip(probs, dims=spatial)
            total = probs if total is None else total + probs
        result = total / len(combos)
    if was_training:
        net.train()
    return result.numpy()


def ensemble_predict(
    members: EnsembleManifest | list[Network],
    patch: np.ndarray,
    tta: bool = True,
) -> np.ndarray:
    """Mean of member TTA predictions. Manifest members are accumulated in
    sorted-checkpoint-path order, so the result is bit-identical under
    member permutation; an explicit network list is used as given."""
    if isinstance(members, EnsembleManifest):
        order = np.argsort([str(p) for p in members.checkpoints])
        nets = members.load_networks()
        nets = [nets[i] for i in order]
    else:
        nets = list(members)
        if not nets:
            raise InferenceError("no ensemble members to predict with")
    # float64 accumulation is exact for sums of float32 probabilities, so
    # the mean of identical members reproduces the member bit-for-bit and
    # the result does not depend on summation order at all
    total = None
    for net in nets:
        probs = tta_predict(net, patch, enabled=tta).astype(np.float64)
        total = probs if total is None else total + probs
    return total / len(nets)


def postprocess(
    prob_map: np.ndarray,
    geometry: PatchGeometry,
    native_grid: Volume3D | LabelVolume,
) -> LabelVolume:
    """Map patch probabilities back to the native grid and take the argmax.

    Undoes crop/pad, resamples every class channel through the inverse of
    the preprocessing rigid transform (trilinear), then argmax with ties
    broken toward the lowest class id.
    """
    prob_map = np.asarray(prob_map, dtype=np.float64)
    if prob_map.ndim != 4:
        raise InferenceError(f"expected (C, x, y, z) probabilities, got {prob_map.shape}")
    if tuple(prob_map.shape[1:]) != tuple(geometry.patch_shape):
        raise InferenceError(
            f"probability grid {prob_map.shape[1:]} does not match geometry "
            f"{geometry.patch_shape}"
        )
    on_grid = geometry.restore(prob_map)
    # native voxel -> template-grid voxel through the forward rigid (the
    # pull-back of its inverse)
    native_probs = warp_array_channels(
        on_grid,
        geometry.rigid.inverse(),
        source_affine=np.asarray(geometry.grid_affine),
        grid_shape=native_grid.shape,
        grid_affine=np.asarray(native_grid.affine),
        order=1,
    )
    labels = np.argmax(native_probs, axis=0)
    return LabelVolume(
        labels.astype(np.uint8 if prob_map.shape[0] <= 256 else np.uint16),
        native_grid.spacing,
        native_grid.affine,
    )


def dice_score(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|A.B| / (|A|+|B|) over binary masks; both empty -> 1, one empty -> 0."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise InferenceError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    a = int(pred.sum())
    b = int(gt.sum())
    if a + b == 0:
        return 1.0
    inter = int(np.logical_and(pred, gt).sum())
    return 2.0 * inter / (a + b)


@dataclass
class CaseDice:
    case_id: str
    class_id: int
    class_name: str
    dice: float
    absent: bool  # class missing from both prediction and ground truth


@dataclass
class EvaluationReport:
    rows: list[CaseDice] = field(default_factory=list)
    unpaired: list[str] = field(default_factory=list)

    def class_ids(self):
        return sorted({r.class_id for r in self.rows})

    def per_class(self, class_id: int) -> list[CaseDice]:
        return [r for r in self.rows if r.class_id == class_id]

    def summary(self):
        """Per class: (class_id, class_name, mean, population sd, N)."""
        out = []
        for cid in self.class_ids():
            rows = self.per_class(cid)
            values = np.array([r.dice for r in rows])
            out.append((cid, rows[0].class_name, float(values.mean()), float(values.std()), len(values)))
        return out


def evaluate_cases(
    predictions: dict[str, LabelVolume],
    ground_truths: dict[str, LabelVolume],
    protocol: LabelProtocol,
) -> EvaluationReport:
    """Per-class Dice per case, plus class-wise mean and population sd.

    Cases present on only one side are reported as unpaired. A class absent
    from both volumes of a case scores 1.0 and is flagged."""
    report = EvaluationReport()
    shared = sorted(set(predictions) & set(ground_truths))
    report.unpaired = sorted(set(predictions) ^ set(ground_truths))
    if not shared and not report.unpaired:
        raise InferenceError("no cases to evaluate")
    for case_id in shared:
        pred = predictions[case_id]
        gt = ground_truths[case_id]
        if not geometry_matches(pred, gt):
            raise InferenceError(f"case {case_id}: prediction/ground-truth grids differ")
        for class_id, class_name in protocol.leaf_classes:
            p = pred.data == class_id
            g = gt.data == class_id
            absent = not (p.any() or g.any())
            report.rows.append(
                CaseDice(
                    case_id=case_id,
                    class_id=class_id,
                    class_name=class_name,
                    dice=dice_score(p, g),
                    absent=absent,
                )
            )
    return report
