"""Seeded random training-time augmentation with paired image/label
spatial consistency.

Order is fixed: zoom -> rotate -> noise -> smooth -> gamma -> flip. The two
resampling transforms (zoom, rotate) are composed into a single coordinate
map so image and target are interpolated exactly once (trilinear / nearest);
flips are exact index reversals applied last.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .transforms import rotation_from_euler


class AugmentError(ValueError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    zoom_range: tuple[float, float] = (0.7, 1.5)
    zoom_prob: float = 0.3
    rotate_range_deg: tuple[float, float] = (-15.0, 15.0)
    rotate_prob: float = 0.3
    noise_std: float = 0.1
    noise_prob: float = 0.3
    smooth_sigma_range: tuple[float, float] = (0.5, 1.5)
    smooth_prob: float = 0.2
    gamma_range: tuple[float, float] = (0.7, 1.5)
    gamma_prob: float = 0.3
    flip_prob: float = 0.5  # per axis

    def __post_init__(self):
        for name in ("zoom_prob", "rotate_prob", "noise_prob", "smooth_prob", "gamma_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise AugmentError(f"{name} must be in [0, 1], got {p}")
        for name in ("zoom_range", "rotate_range_deg", "smooth_sigma_range", "gamma_range"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise AugmentError(f"{name} must be a non-degenerate (lo, hi) range")
        if self.zoom_range[0] <= 0 or self.gamma_range[0] <= 0:
            raise AugmentError("zoom and gamma ranges must be positive")


@dataclass
class AugmentPlan:
    """One sampled draw: which augmentations fire and with what parameters."""

    zoom: float | None = None
    rotate_rad: tuple[float, float, float] | None = None
    noise: np.ndarray | None = None
    smooth_sigma: tuple[float, float, float] | None = None
    gamma: float | None = None
    flip_axes: tuple[int, ...] = ()

    def spatial_matrix(self, shape) -> np.ndarray | None:
        """Voxel-space sampling map of the composed zoom+rotation, or None.

        output[v] = input[M @ (v - c) + c] with c the patch center.
        """
        if self.zoom is None and self.rotate_rad is None:
            return None
        m = np.eye(3)
        if self.rotate_rad is not None:
            m = m @ rotation_from_euler(*self.rotate_rad).T  # sample with inverse rotation
        if self.zoom is not None:
            m = m / self.zoom
        return m


def draw_plan(config: AugmentConfig, shape, rng: np.random.Generator) -> AugmentPlan:
    """Sample a plan. Gate variables are always drawn (in fixed order) so the
    rng advances deterministically regardless of which gates open."""
    gates = rng.random(5)
    flip_gates = rng.random(3)
    plan = AugmentPlan()
    if gates[0] < config.zoom_prob:
        plan.zoom = float(rng.uniform(*config.zoom_range))
    if gates[1] < config.rotate_prob:
        lo, hi = np.deg2rad(config.rotate_range_deg)
        plan.rotate_rad = tuple(rng.uniform(lo, hi, size=3))
    if gates[2] < config.noise_prob:
        plan.noise = rng.normal(0.0, config.noise_std, size=shape)
    if gates[3] < config.smooth_prob:
        plan.smooth_sigma = tuple(rng.uniform(*config.smooth_sigma_range, size=3))
    if gates[4] < config.gamma_prob:
        plan.gamma = float(rng.uniform(*config.gamma_range))
    plan.flip_axes = tuple(int(a) for a in range(3) if flip_gates[a] < config.flip_prob)
    return plan


def random_gamma(image: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma transform on min-max rescaled intensities, mapped back to the
    original range. Constant images pass through unchanged."""
    if gamma <= 0:
        raise AugmentError(f"gamma must be positive, got {gamma}")
    lo = float(image.min())
    hi = float(image.max())
    if hi == lo:
        return image.copy()
    unit = (image - lo) / (hi - lo)
    return lo + (hi - lo) * np.power(unit, gamma)


def _sample_coordinates(shape, matrix: np.ndarray) -> np.ndarray:
    """(3, N) input coordinates for every output voxel, map about the center."""
    center = (np.array(shape, dtype=np.float64) - 1) / 2.0
    idx = np.indices(shape, dtype=np.float64).reshape(3, -1)
    return matrix @ (idx - center[:, None]) + center[:, None]


def _resample_spatial(data: np.ndarray, matrix: np.ndarray, order: int) -> np.ndarray:
    """Zero-padded resampling: order 0 = nearest (ties round half to even),
    order 1 = trilinear."""
    shape = data.shape
    src = _sample_coordinates(shape, matrix)
    bounds = np.array(shape, dtype=np.float64)[:, None]
    if order == 0:
        nearest = np.rint(src).astype(np.int64)
        valid = np.all((nearest >= 0) & (nearest < bounds), axis=0)
        out = np.zeros(src.shape[1], dtype=data.dtype)
        n = nearest[:, valid]
        out[valid] = data[n[0], n[1], n[2]]
        return out.reshape(shape)
    floor = np.floor(src).astype(np.int64)
    frac = src - floor
    out = np.zeros(src.shape[1], dtype=np.float64)
    for corner in np.ndindex(2, 2, 2):
        offs = np.array(corner)[:, None]
        pos = floor + offs
        weight = np.prod(np.where(offs == 1, frac, 1.0 - frac), axis=0)
        valid = np.all((pos >= 0) & (pos < bounds), axis=0)
        p = pos[:, valid]
        out[valid] += weight[valid] * data[p[0], p[1], p[2]]
    return out.reshape(shape)


def apply_plan(image: np.ndarray, target: np.ndarray | None, plan: AugmentPlan):
    """Apply a drawn plan: spatial map to both carriers, intensity ops to the
    image only. Output shapes equal input shapes."""
    image = np.asarray(image, dtype=np.float64)
    out_t = None if target is None else np.asarray(target)

    matrix = plan.spatial_matrix(image.shape)
    if matrix is not None:
        image = _resample_spatial(image, matrix, order=1)
        if out_t is not None:
            dtype = out_t.dtype
            out_t = _resample_spatial(out_t.astype(np.float64), matrix, order=0).astype(dtype)

    if plan.noise is not None:
        image = image + plan.noise
    if plan.smooth_sigma is not None:
        image = ndimage.gaussian_filter(image, sigma=plan.smooth_sigma)
    if plan.gamma is not None:
        image = random_gamma(image, plan.gamma)

    if plan.flip_axes:
        image = np.flip(image, axis=plan.flip_axes).copy()
        if out_t is not None:
            out_t = np.flip(out_t, axis=plan.flip_axes).copy()
    return image.astype(np.float32), out_t


def apply_augmentations(
    image: np.ndarray,
    target: np.ndarray | None,
    config: AugmentConfig,
    rng: np.random.Generator,
):
    """Draw and apply one augmentation round; returns (image, target, rng)."""
    image = np.asarray(image)
    if target is not None and np.asarray(target).shape != image.shape:
        raise AugmentError(
            f"image shape {image.shape} and target shape {np.asarray(target).shape} differ"
        )
    plan = draw_plan(config, image.shape, rng)
    out_i, out_t = apply_plan(image, target, plan)
    return out_i, out_t, rng


def per_sample_rng(run_seed: int, epoch: int, case_key: str) -> np.random.Generator:
    """Independent, reproducible stream per (run, epoch, case)."""
    import zlib

    case_hash = zlib.crc32(case_key.encode("utf-8"))
    seq = np.random.SeedSequence([run_seed, epoch, case_hash])
    return np.random.default_rng(seq)
