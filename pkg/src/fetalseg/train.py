"""Optimization orchestration: splits, schedule, batching, deep supervision,
checkpointing, and ensemble member management."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .augment import AugmentConfig, apply_augmentations, per_sample_rng
from .labelset import LabelSetMapping, MappingRegistry
from .losses import LossConfig, PartialTarget, deep_supervision_loss
from .model import CheckpointMeta, UNetConfig, build_network, save_checkpoint


class TrainConfigError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 2
    momentum: float = 0.99
    weight_decay: float = 3e-5
    lr_initial: float = 0.01
    lr_power: float = 0.9
    epochs: int = 2200
    split_fraction: float = 0.9
    seed: int = 0
    samples_per_epoch: int | None = None  # default: number of training cases

    def __post_init__(self):
        if not 0.0 < self.split_fraction < 1.0:
            raise TrainConfigError(f"split_fraction must be in (0, 1), got {self.split_fraction}")
        if self.epochs < 1:
            raise TrainConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if self.lr_initial <= 0:
            raise TrainConfigError("lr_initial must be positive")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_initial": self.lr_initial,
            "lr_power": self.lr_power,
            "epochs": self.epochs,
            "split_fraction": self.split_fraction,
            "seed": self.seed,
            "samples_per_epoch": self.samples_per_epoch,
        }


@dataclass
class RunRecord:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    checkpoint_path: str = ""
    train_cases: list[str] = field(default_factory=list)
    val_cases: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "lr": self.lr,
            "checkpoint_path": self.checkpoint_path,
            "train_cases": self.train_cases,
            "val_cases": self.val_cases,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)


@dataclass
class TrainingSample:
    """One preprocessed case ready for optimization."""

    case_id: str
    image: np.ndarray  # normalized patch
    labels: np.ndarray  # partial label ids on the patch grid
    mapping_name: str


def split_dataset(case_ids, fraction: float = 0.9, seed: int = 0):
    """Disjoint, exhaustive random split with ceil(fraction*N) training cases."""
    case_ids = list(case_ids)
    if len(case_ids) < 2:
        raise TrainConfigError(f"need at least 2 cases to split, got {len(case_ids)}")
    n_train = math.ceil(fraction * len(case_ids))
    order = np.random.default_rng(seed).permutation(len(case_ids))
    train = [case_ids[i] for i in order[:n_train]]
    val = [case_ids[i] for i in order[n_train:]]
    return train, val


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Polynomial decay: lr_initial * (1 - epoch/epochs)^power."""
    if not 0 <= epoch <= config.epochs:
        raise TrainConfigError(f"epoch {epoch} outside [0, {config.epochs}]")
    return config.lr_initial * (1.0 - epoch / config.epochs) ** config.lr_power


def _epoch_order(case_ids, samples_per_epoch: int, rng: np.random.Generator):
    perm = [case_ids[i] for i in rng.permutation(len(case_ids))]
    reps = math.ceil(samples_per_epoch / len(perm))
    return (perm * reps)[:samples_per_epoch]


def _sample_loss(
    net, sample: TrainingSample, mapping: LabelSetMapping, loss_config: LossConfig,
    augment_config: AugmentConfig | None, rng, device,
):
    image, labels = sample.image, sample.labels
    if augment_config is not None:
        image, labels, _ = apply_augmentations(image, labels, augment_config, rng)
    x = torch.as_tensor(np.ascontiguousarray(image), dtype=torch.float32, device=device)
    outputs = net(x.unsqueeze(0).unsqueeze(0))
    target = PartialTarget(
        labels=torch.as_tensor(np.ascontiguousarray(labels), device=device), mapping=mapping
    )
    return deep_supervision_loss([o[0] for o in outputs], target, loss_config)


def train_model(
    config: TrainConfig,
    samples: list[TrainingSample],
    registry: MappingRegistry,
    unet_config: UNetConfig,
    loss_config: LossConfig | None = None,
    augment_config: AugmentConfig | None = None,
    output_dir=None,
    run_name: str = "run",
    device: str = "cpu",
):
    """Train one network; returns (network, RunRecord). With an output_dir
    the final checkpoint and record are also written to disk.

    Each step: augment -> forward (train mode) -> deep-supervision label-set
    loss with the case's own mapping -> Nesterov-momentum SGD step with
    coupled weight decay. The final checkpoint is the last epoch's
    parameters; there is no best-validation selection. A non-finite loss
    aborts with the partial record attached.
    """
    loss_config = loss_config or LossConfig()
    by_id = {s.case_id: s for s in samples}
    train_ids, val_ids = split_dataset(sorted(by_id), config.split_fraction, config.seed)
    if not train_ids:
        raise TrainConfigError("empty training split")

    ds_levels = unet_config.deep_supervision_levels
    if len(loss_config.deep_supervision_weights) != ds_levels:
        raise TrainConfigError(
            f"{len(loss_config.deep_supervision_weights)} supervision weights for "
            f"{ds_levels} supervised levels"
        )

    net = build_network(unet_config, seed=config.seed).to(device)
    optimizer = torch.optim.SGD(
        net.parameters(),
        lr=config.lr_initial,
        momentum=config.momentum,
        nesterov=config.momentum > 0,
        weight_decay=config.weight_decay,
    )

    record = RunRecord(train_cases=list(train_ids), val_cases=list(val_ids))
    samples_per_epoch = config.samples_per_epoch or len(train_ids)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xE0C]))

    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr

        net.train()
        order = _epoch_order(train_ids, samples_per_epoch, order_rng)
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            optimizer.zero_grad()
            batch_loss = None
            for case_id in batch:
                sample = by_id[case_id]
                rng = per_sample_rng(config.seed, epoch, case_id)
                loss = _sample_loss(
                    net, sample, registry.get(sample.mapping_name), loss_config,
                    augment_config, rng, device,
                )
                batch_loss = loss if batch_loss is None else batch_loss + loss
            batch_loss = batch_loss / len(batch)
            if not torch.isfinite(batch_loss):
                record.train_loss.append(float("nan"))
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {start // config.batch_size}",
                    record=record,
                )
            batch_loss.backward()
            optimizer.step()
            epoch_losses.append(float(batch_loss.detach()))

        record.lr.append(lr)
        record.train_loss.append(float(np.mean(epoch_losses)))
        record.val_loss.append(
            _validation_loss(net, by_id, val_ids, registry, loss_config, device)
        )

    net.eval()
    if output_dir is not None:
        output_dir = Path(output_dir)
        output_dir.mkdir(parents=True, exist_ok=True)
        ckpt_path = output_dir / f"{run_name}.pt"
        meta = CheckpointMeta(
            seed=config.seed,
            epoch=config.epochs,
            split_id=",".join(train_ids),
        )
        save_checkpoint(net, ckpt_path, meta)
        record.checkpoint_path = str(ckpt_path)
        record.save(output_dir / f"{run_name}_record.json")
    return net, record


def _validation_loss(net, by_id, val_ids, registry, loss_config, device) -> float:
    if not val_ids:
        return float("nan")
    net.train()  # deep-supervision outputs, but no rng consumption
    losses = []
    with torch.no_grad():
        for case_id in val_ids:
            sample = by_id[case_id]
            loss = _sample_loss(
                net, sample, registry.get(sample.mapping_name), loss_config,
                None, None, device,
            )
            losses.append(float(loss))
    net.eval()
    return float(np.mean(losses))


def member_seeds(base_seed: int, n_members: int) -> list[int]:
    seq = np.random.SeedSequence(base_seed)
    return [int(s.generate_state(1)[0] % (2**31)) for s in seq.spawn(n_members)]


def train_ensemble(
    n_members: int,
    base_seed: int,
    config: TrainConfig,
    samples: list[TrainingSample],
    registry: MappingRegistry,
    unet_config: UNetConfig,
    loss_config: LossConfig | None = None,
    augment_config: AugmentConfig | None = None,
    output_dir=None,
    device: str = "cpu",
) -> dict:
    """Train n independent members, each with its own split/init seed.

    Returns the ensemble manifest dict; per-member failures are recorded,
    not raised, so one diverging member does not sink the ensemble.
    """
    if n_members < 1:
        raise TrainConfigError("ensemble needs at least one member")
    manifest = {"members": [], "unet_config": unet_config.to_dict(), "base_seed": base_seed}
    for idx, seed in enumerate(member_seeds(base_seed, n_members)):
        member_cfg = TrainConfig(**{**config.to_dict(), "seed": seed})
        entry = {"member": idx, "seed": seed}
        try:
            _, record = train_model(
                member_cfg, samples, registry, unet_config, loss_config,
                augment_config, output_dir=output_dir, run_name=f"member_{idx:02d}",
                device=device,
            )
            entry["status"] = "ok"
            entry["checkpoint"] = record.checkpoint_path
            entry["train_cases"] = record.train_cases
        except TrainingDivergedError as exc:
            entry["status"] = "failed"
            entry["error"] = str(exc)
        manifest["members"].append(entry)
    if output_dir is not None:
        with open(Path(output_dir) / "ensemble.json", "w") as f:
            json.dump(manifest, f, indent=2)
    return manifest
