import numpy as np
import pytest
import torch

from fetalseg.labelset import LabelSetMapping
from fetalseg.losses import (
    LossConfig,
    LossInputError,
    PartialTarget,
    combined_loss,
    deep_supervision_loss,
    default_supervision_weights,
    downsample_target,
    leaf_dice,
    marginalized_cross_entropy,
)
from synthdata import synth_protocol, synth_registry

EPS_DICE = 1e-5
EPS_LOG = 1e-8


@pytest.fixture(scope="module")
def registry():
    return synth_registry()


@pytest.fixture(scope="module")
def full(registry):
    return registry.get("synth_full")


@pytest.fixture(scope="module")
def partial(registry):
    return registry.get("synth_partial")


def random_probs(shape, num_classes, rng, dtype=torch.float64):
    logits = torch.as_tensor(rng.normal(size=(num_classes, *shape)))
    return torch.softmax(logits, dim=0).to(dtype)


def onehot_from(labels, num_classes, dtype=torch.float64):
    flat = torch.as_tensor(np.asarray(labels)).long()
    eye = torch.eye(num_classes, dtype=dtype)
    return eye[flat].movedim(-1, 0)


# --- marginalized cross entropy ----------------------------------------------


def test_ce_uniform_singleton(full):
    p = torch.full((4, 2, 2, 2), 0.25, dtype=torch.float64)
    labels = torch.zeros((2, 2, 2), dtype=torch.long)
    ce = marginalized_cross_entropy(p, PartialTarget(labels, full))
    assert float(ce) == pytest.approx(-np.log(0.25 + EPS_LOG), abs=1e-12)


def test_ce_full_set_voxel_near_zero():
    protocol = synth_protocol()
    whole = LabelSetMapping(
        name="whole", protocol=protocol, partial_labels=((0, frozenset({0, 1, 2, 3})),)
    )
    rng = np.random.default_rng(0)
    p = random_probs((3, 3, 3), 4, rng)
    ce = marginalized_cross_entropy(p, PartialTarget(torch.zeros((3, 3, 3)).long(), whole))
    assert abs(float(ce)) < 1e-6


def test_ce_within_set_redistribution_invariance(partial):
    # mass 0.2 on leaf 2 and 0.3 on leaf 3, set {2,3} -> -log(0.5); same for (0.5, 0)
    p1 = torch.tensor([0.3, 0.2, 0.2, 0.3], dtype=torch.float64).reshape(4, 1, 1, 1)
    p2 = torch.tensor([0.3, 0.2, 0.5, 0.0], dtype=torch.float64).reshape(4, 1, 1, 1)
    labels = torch.full((1, 1, 1), 2, dtype=torch.long)  # the merged set
    target = PartialTarget(labels, partial)
    a = float(marginalized_cross_entropy(p1, target))
    b = float(marginalized_cross_entropy(p2, target))
    assert a == pytest.approx(-np.log(0.5 + EPS_LOG), abs=1e-12)
    assert abs(a - b) < 1e-12


def test_ce_reduces_to_standard_ce(full):
    rng = np.random.default_rng(1)
    for _ in range(20):
        shape = tuple(rng.integers(1, 4, size=3))
        p = random_probs(shape, 4, rng)
        labels = torch.as_tensor(rng.integers(0, 4, size=shape)).long()
        ce = marginalized_cross_entropy(p, PartialTarget(labels, full))
        std = -(p.gather(0, labels.unsqueeze(0)).squeeze(0) + EPS_LOG).log().mean()
        assert abs(float(ce) - float(std)) < 1e-9


def test_ce_monotone_in_set_mass(partial):
    labels = torch.full((1, 1, 1), 2, dtype=torch.long)
    target = PartialTarget(labels, partial)
    values = []
    for mass in (0.2, 0.4, 0.6, 0.8):
        rest = (1 - mass) / 2
        p = torch.tensor([rest, rest, mass / 2, mass / 2], dtype=torch.float64)
        values.append(float(marginalized_cross_entropy(p.reshape(4, 1, 1, 1), target)))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_ce_rejects_unnormalized(full):
    p = torch.full((4, 2, 2, 2), 0.3, dtype=torch.float64)
    with pytest.raises(LossInputError, match="normalized"):
        marginalized_cross_entropy(p, PartialTarget(torch.zeros((2, 2, 2)).long(), full))


def test_ce_rejects_shape_mismatch(full):
    p = torch.full((4, 2, 2, 2), 0.25, dtype=torch.float64)
    with pytest.raises(LossInputError):
        marginalized_cross_entropy(p, PartialTarget(torch.zeros((3, 3, 3)).long(), full))


def test_target_rejects_out_of_range_ids(partial):
    with pytest.raises(LossInputError):
        PartialTarget(torch.full((2, 2, 2), 3, dtype=torch.long), partial)  # K=3


# --- leaf dice -----------------------------------------------------------------


def test_leaf_dice_perfect_prediction(full):
    rng = np.random.default_rng(2)
    labels = rng.integers(0, 4, size=(3, 3, 3))
    p = onehot_from(labels, 4)
    loss = leaf_dice(p, PartialTarget(labels, full))
    assert float(loss) <= 1e-3


def test_leaf_dice_every_voxel_wrong(full):
    labels = (np.arange(27).reshape(3, 3, 3) % 4).astype(np.int64)  # all classes present
    wrong = (labels + 1) % 4
    p = onehot_from(wrong, 4)
    loss = leaf_dice(p, PartialTarget(labels, full))
    assert float(loss) >= 1 - 1e-3


def brute_force_leaf_dice(p, labels, mapping, eps=EPS_DICE):
    """Literal transcription of the formula, plain python loops."""
    num_classes = mapping.protocol.num_classes
    singles = mapping.singleton_leaves()
    shape = labels.shape
    total = 0.0
    for c in range(num_classes):
        inter = 0.0
        gt = 0.0
        psq = 0.0
        for idx in np.ndindex(*shape):
            g = 1.0 if (int(labels[idx]) in singles and singles[int(labels[idx])] == c) else 0.0
            pv = float(p[(c, *idx)])
            inter += g * pv
            gt += g
            psq += pv * pv
        total += (2 * inter + eps) / (gt + psq + eps)
    return 1.0 - total / num_classes


def test_leaf_dice_matches_bruteforce(partial, full):
    rng = np.random.default_rng(3)
    for mapping in (partial, full):
        for _ in range(5):
            shape = (2, 2, 1)  # 4-voxel instances
            p = random_probs(shape, 4, rng)
            labels = rng.integers(0, mapping.num_partial, size=shape)
            ours = float(leaf_dice(p, PartialTarget(labels, mapping)))
            expected = brute_force_leaf_dice(p.numpy(), labels, mapping)
            assert ours == pytest.approx(expected, abs=1e-12)


def test_leaf_dice_reduces_to_mean_soft_dice(full):
    rng = np.random.default_rng(4)
    for _ in range(20):
        shape = tuple(rng.integers(1, 4, size=3))
        p = random_probs(shape, 4, rng)
        labels = rng.integers(0, 4, size=shape)
        ours = float(leaf_dice(p, PartialTarget(labels, full)))
        g = onehot_from(labels, 4)
        axes = tuple(range(1, 4))
        dice_per_class = (2 * (g * p).sum(axes) + EPS_DICE) / (
            g.sum(axes) + (p * p).sum(axes) + EPS_DICE
        )
        expected = float(1 - dice_per_class.mean())
        assert abs(ours - expected) < 1e-9


def test_leaf_dice_range(partial):
    rng = np.random.default_rng(5)
    for _ in range(50):
        p = random_probs((3, 3, 3), 4, rng)
        labels = rng.integers(0, 3, size=(3, 3, 3))
        value = float(leaf_dice(p, PartialTarget(labels, partial)))
        assert 0.0 <= value <= 1.0 + 1e-4


# --- combined + deep supervision ------------------------------------------------


def test_combined_is_sum(full):
    rng = np.random.default_rng(6)
    p = random_probs((2, 3, 2), 4, rng)
    labels = rng.integers(0, 4, size=(2, 3, 2))
    target = PartialTarget(labels, full)
    assert float(combined_loss(p, target)) == pytest.approx(
        float(leaf_dice(p, target)) + float(marginalized_cross_entropy(p, target)), abs=1e-12
    )


def test_combined_near_zero_at_optimum(full):
    labels = np.random.default_rng(7).integers(0, 4, size=(3, 3, 3))
    p = onehot_from(labels, 4)
    assert float(combined_loss(p, PartialTarget(labels, full))) < 2e-3


def test_default_supervision_weights():
    w = default_supervision_weights(4)
    assert np.allclose(w, (8 / 15, 4 / 15, 2 / 15, 1 / 15))
    assert sum(w) == pytest.approx(1.0, abs=1e-12)


def test_deep_supervision_degenerate_weights(full):
    rng = np.random.default_rng(8)
    outputs = [random_probs((4, 4, 4), 4, rng), random_probs((2, 2, 2), 4, rng)]
    labels = rng.integers(0, 4, size=(4, 4, 4))
    target = PartialTarget(labels, full)
    cfg = LossConfig(deep_supervision_weights=(1.0, 0.0))
    total = deep_supervision_loss(outputs, target, cfg)
    assert float(total) == pytest.approx(float(combined_loss(outputs[0], target)), abs=1e-12)


def test_deep_supervision_matches_hand_weighted_sum(full):
    rng = np.random.default_rng(9)
    outputs = [
        random_probs((8, 8, 8), 4, rng),
        random_probs((4, 4, 4), 4, rng),
        random_probs((2, 2, 2), 4, rng),
        random_probs((1, 1, 1), 4, rng),
    ]
    labels = rng.integers(0, 4, size=(8, 8, 8))
    target = PartialTarget(labels, full)
    cfg = LossConfig()  # (8/15, 4/15, 2/15, 1/15)
    total = float(deep_supervision_loss(outputs, target, cfg))
    expected = 0.0
    for s, (w, out) in enumerate(zip(cfg.deep_supervision_weights, outputs)):
        expected += w * float(combined_loss(out, downsample_target(target, s), cfg))
    assert total == pytest.approx(expected, abs=1e-12)


def test_deep_supervision_perfect_everywhere(full):
    rng = np.random.default_rng(10)
    labels = rng.integers(0, 4, size=(8, 8, 8))
    target = PartialTarget(labels, full)
    outputs = []
    lab = labels
    for _ in range(4):
        outputs.append(onehot_from(lab, 4))
        lab = lab[::2, ::2, ::2]
    assert float(deep_supervision_loss(outputs, target)) < 2e-3


def test_deep_supervision_level_count_mismatch(full):
    rng = np.random.default_rng(11)
    outputs = [random_probs((4, 4, 4), 4, rng)]
    labels = rng.integers(0, 4, size=(4, 4, 4))
    with pytest.raises(LossInputError, match="supervision"):
        deep_supervision_loss(outputs, PartialTarget(labels, full))


def test_downsample_target_is_strided_nearest(full):
    labels = np.arange(64).reshape(4, 4, 4) % 3
    t = downsample_target(PartialTarget(labels, full), 1)
    assert np.array_equal(t.labels.numpy(), labels[::2, ::2, ::2])


# --- gradients -------------------------------------------------------------------


def finite_difference_grad(fn, p, step=1e-4):
    g = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        hi = p.copy()
        lo = p.copy()
        hi[idx] += step
        lo[idx] -= step
        g[idx] = (fn(hi) - fn(lo)) / (2 * step)
        it.iternext()
    return g


@pytest.mark.parametrize("loss_name", ["ce", "dice", "combined"])
def test_gradients_match_finite_differences(loss_name, registry):
    protocol = registry.protocol("synth")
    mapping3 = LabelSetMapping(
        name="three",
        protocol=protocol,
        partial_labels=((0, frozenset({0})), (1, frozenset({1})), (2, frozenset({2, 3}))),
    )
    fns = {
        "ce": marginalized_cross_entropy,
        "dice": leaf_dice,
        "combined": combined_loss,
    }
    fn = fns[loss_name]
    rng = np.random.default_rng(12)
    for _ in range(5):
        shape = (3, 3, 3)  # 27 voxels <= 30
        p = random_probs(shape, 4, rng).numpy()
        labels = rng.integers(0, 3, size=shape)
        target = PartialTarget(labels, mapping3)

        pt = torch.as_tensor(p).clone().requires_grad_(True)
        fn(pt, target).backward()
        analytic = pt.grad.numpy()

        numeric = finite_difference_grad(
            lambda arr: float(fn(torch.as_tensor(arr), target)), p
        )
        scale = max(np.abs(numeric).max(), 1e-12)
        assert np.abs(analytic - numeric).max() / scale < 1e-5
