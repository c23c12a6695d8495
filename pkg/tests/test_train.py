import math

import numpy as np
import pytest
import torch

from fetalseg.augment import AugmentConfig
from fetalseg.losses import LossConfig
from fetalseg.model import UNetConfig, build_network
from fetalseg.train import (
    TrainConfig,
    TrainConfigError,
    TrainingDivergedError,
    TrainingSample,
    lr_schedule,
    member_seeds,
    split_dataset,
    train_ensemble,
    train_model,
)
from synthdata import synth_registry

TINY_UNET = UNetConfig(
    in_channels=1,
    num_classes=4,
    base_features=4,
    num_resolution_reductions=1,
    deep_supervision_levels=1,
    patch_shape=(16, 16, 16),
)
TINY_LOSS = LossConfig(deep_supervision_weights=(1.0,))


def tiny_samples(n=4, shape=(16, 16, 16), seed=0, mapping="synth_full"):
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        labels = np.zeros(shape, dtype=np.int64)
        labels[4:12, 4:12, 4:12] = 1
        labels[6:10, 6:10, 6:10] = 2 + (i % 2)
        image = labels * 1.0 + rng.normal(0, 0.05, shape)
        if mapping == "synth_partial":
            labels = np.where(labels == 3, 2, labels)
        samples.append(
            TrainingSample(
                case_id=f"t{i:02d}", image=image.astype(np.float32),
                labels=labels, mapping_name=mapping,
            )
        )
    return samples


# --- split ---------------------------------------------------------------------


def test_split_sizes_and_determinism():
    ids = [f"case{i}" for i in range(10)]
    train_a, val_a = split_dataset(ids, 0.9, seed=5)
    train_b, val_b = split_dataset(ids, 0.9, seed=5)
    assert len(train_a) == 9 and len(val_a) == 1
    assert train_a == train_b and val_a == val_b


def test_split_paper_corpus_arithmetic():
    ids = [f"case{i}" for i in range(223)]  # 78 + 18 + 15 + 112
    train, val = split_dataset(ids, 0.9, seed=0)
    assert len(train) == math.ceil(0.9 * 223) == 201
    assert len(val) == 22


def test_split_is_partition():
    ids = [f"case{i}" for i in range(37)]
    train, val = split_dataset(ids, 0.9, seed=1)
    assert set(train) | set(val) == set(ids)
    assert set(train) & set(val) == set()


def test_split_seeds_differ_overwhelmingly():
    ids = [f"case{i}" for i in range(100)]
    splits = [split_dataset(ids, 0.9, seed=s) for s in range(100)]
    assert all(len(t) == 90 and len(v) == 10 for t, v in splits)
    memberships = {tuple(sorted(v)) for _, v in splits}
    assert len(memberships) >= 99


def test_split_needs_two_cases():
    with pytest.raises(TrainConfigError):
        split_dataset(["only"], 0.9, seed=0)


# --- lr schedule -----------------------------------------------------------------


def test_lr_schedule_endpoints_exact():
    cfg = TrainConfig(epochs=2200)
    assert lr_schedule(0, cfg) == 0.01
    assert lr_schedule(2200, cfg) == 0.0


def test_lr_schedule_midpoint():
    cfg = TrainConfig(epochs=2200)
    assert lr_schedule(1100, cfg) == pytest.approx(0.01 * 0.5**0.9, abs=1e-15)


def test_lr_schedule_strictly_decreasing():
    cfg = TrainConfig(epochs=2200)
    values = [lr_schedule(e, cfg) for e in range(2201)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_lr_schedule_out_of_range():
    cfg = TrainConfig(epochs=10)
    with pytest.raises(TrainConfigError):
        lr_schedule(11, cfg)
    with pytest.raises(TrainConfigError):
        lr_schedule(-1, cfg)


# --- optimizer contracts ----------------------------------------------------------


def test_zero_lr_step_freezes_parameters():
    net = build_network(TINY_UNET, seed=0)
    optimizer = torch.optim.SGD(
        net.parameters(), lr=0.0, momentum=0.99, nesterov=True, weight_decay=3e-5
    )
    before = [p.detach().clone() for p in net.parameters()]
    net.train()
    out = net(torch.randn(1, 1, 16, 16, 16))
    loss = out[0].mean()
    loss.backward()
    optimizer.step()
    for prev, now in zip(before, net.parameters()):
        assert torch.equal(prev, now)


def test_loss_decreases_on_fixed_batch_across_seeds():
    samples = tiny_samples(n=2)
    registry = synth_registry()
    improved = 0
    for seed in range(10):
        cfg = TrainConfig(
            batch_size=2, momentum=0.95, lr_initial=0.05, epochs=10,
            samples_per_epoch=2, seed=seed, weight_decay=3e-5,
        )
        _, record = train_model(cfg, samples, registry, TINY_UNET, TINY_LOSS)
        improved += record.train_loss[-1] < record.train_loss[0]
    assert improved >= 9


# --- training loop -----------------------------------------------------------------


def test_training_determinism():
    samples = tiny_samples()
    registry = synth_registry()
    cfg = TrainConfig(
        batch_size=2, momentum=0.9, lr_initial=0.01, epochs=2,
        samples_per_epoch=4, seed=7, weight_decay=3e-5,
    )
    augment = AugmentConfig()
    _, rec_a = train_model(cfg, samples, registry, TINY_UNET, TINY_LOSS, augment)
    _, rec_b = train_model(cfg, samples, registry, TINY_UNET, TINY_LOSS, augment)
    assert np.allclose(rec_a.train_loss, rec_b.train_loss, atol=1e-6)
    assert rec_a.train_cases == rec_b.train_cases


def test_training_with_partial_only_annotations_completes():
    samples = tiny_samples(n=2, mapping="synth_partial")
    registry = synth_registry()
    cfg = TrainConfig(batch_size=2, epochs=1, samples_per_epoch=2, seed=0)
    net, record = train_model(cfg, samples, registry, TINY_UNET, TINY_LOSS)
    assert len(record.train_loss) == 1
    assert np.isfinite(record.train_loss[0])


def test_nan_loss_aborts_with_record():
    samples = tiny_samples(n=2)
    samples[0].image[0, 0, 0] = np.nan
    registry = synth_registry()
    cfg = TrainConfig(batch_size=2, epochs=1, samples_per_epoch=2, seed=0)
    with pytest.raises(TrainingDivergedError) as excinfo:
        train_model(cfg, samples, registry, TINY_UNET, TINY_LOSS)
    assert excinfo.value.record is not None
    assert math.isnan(excinfo.value.record.train_loss[-1])


def test_run_record_and_checkpoint_written(tmp_path):
    samples = tiny_samples()
    registry = synth_registry()
    cfg = TrainConfig(batch_size=2, epochs=2, samples_per_epoch=2, seed=1, split_fraction=0.7)
    net, record = train_model(
        cfg, samples, registry, TINY_UNET, TINY_LOSS, output_dir=tmp_path, run_name="toy"
    )
    assert (tmp_path / "toy.pt").exists()
    assert (tmp_path / "toy_record.json").exists()
    assert record.checkpoint_path.endswith("toy.pt")
    assert len(record.lr) == 2 and record.lr[0] > record.lr[1]
    # validation split non-empty at 0.7: ceil(0.7*4)=3 train, 1 val
    assert len(record.val_cases) == 1
    assert all(np.isfinite(v) for v in record.val_loss)


# --- ensemble ----------------------------------------------------------------------


def test_member_seeds_distinct_and_stable():
    a = member_seeds(42, 10)
    b = member_seeds(42, 10)
    assert a == b
    assert len(set(a)) == 10


def test_ensemble_two_members_different_splits(tmp_path):
    samples = tiny_samples(n=4)
    registry = synth_registry()
    cfg = TrainConfig(batch_size=2, epochs=1, samples_per_epoch=2, split_fraction=0.6)
    manifest = train_ensemble(
        2, base_seed=3, config=cfg, samples=samples, registry=registry,
        unet_config=TINY_UNET, loss_config=TINY_LOSS, output_dir=tmp_path,
    )
    assert len(manifest["members"]) == 2
    assert all(m["status"] == "ok" for m in manifest["members"])
    assert (tmp_path / "ensemble.json").exists()
    splits = [tuple(m["train_cases"]) for m in manifest["members"]]
    assert splits[0] != splits[1]


def test_ensemble_ten_members_registered(tmp_path):
    samples = tiny_samples(n=2)
    registry = synth_registry()
    cfg = TrainConfig(batch_size=2, epochs=1, samples_per_epoch=2)
    manifest = train_ensemble(
        10, base_seed=5, config=cfg, samples=samples, registry=registry,
        unet_config=TINY_UNET, loss_config=TINY_LOSS, output_dir=tmp_path,
    )
    assert len(manifest["members"]) == 10
    assert sum(m["status"] == "ok" for m in manifest["members"]) == 10
    assert len({m["seed"] for m in manifest["members"]}) == 10


def test_ensemble_records_member_failure(tmp_path, monkeypatch):
    import fetalseg.train as train_module

    samples = tiny_samples(n=4)
    registry = synth_registry()
    cfg = TrainConfig(batch_size=2, epochs=1, samples_per_epoch=2)

    real_train = train_module.train_model
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise TrainingDivergedError("synthetic divergence")
        return real_train(*args, **kwargs)

    monkeypatch.setattr(train_module, "train_model", flaky)
    manifest = train_ensemble(
        3, base_seed=1, config=cfg, samples=samples, registry=registry,
        unet_config=TINY_UNET, loss_config=TINY_LOSS, output_dir=tmp_path,
    )
    statuses = [m["status"] for m in manifest["members"]]
    assert statuses.count("ok") == 2
    assert statuses.count("failed") == 1
    failed = next(m for m in manifest["members"] if m["status"] == "failed")
    assert "divergence" in failed["error"]


def test_train_config_validation():
    with pytest.raises(TrainConfigError):
        TrainConfig(split_fraction=1.0)
    with pytest.raises(TrainConfigError):
        TrainConfig(epochs=0)
    with pytest.raises(TrainConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(TrainConfigError):
        train_ensemble(0, 0, TrainConfig(), [], synth_registry(), TINY_UNET)


def test_supervision_weight_count_checked():
    samples = tiny_samples(n=2)
    cfg = TrainConfig(batch_size=2, epochs=1)
    with pytest.raises(TrainConfigError, match="supervision"):
        train_model(cfg, samples, synth_registry(), TINY_UNET, LossConfig())
