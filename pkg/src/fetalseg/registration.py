"""Self-contained intensity-based rigid/affine registration.

Multi-resolution (3-level pyramid, factor 2), normalized cross-correlation
similarity, derivative-free coordinate search with shrinking steps. The
accepted-iterate similarity is non-decreasing within each level by
construction (only improvements are accepted).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .transforms import AffineTransform, RigidTransform, rotation_from_euler
from .volume_io import Volume3D


class RegistrationError(ValueError):
    pass


@dataclass
class RegistrationResult:
    transform: RigidTransform | AffineTransform
    similarity: float
    converged: bool
    iterations: int
    history: list[list[float]] = field(default_factory=list)  # accepted NCC per level


def intensity_centroid(vol: Volume3D) -> np.ndarray:
    """Intensity-weighted centroid of the nonzero region, world coords (mm)."""
    w = np.abs(np.asarray(vol.data, dtype=np.float64))
    total = w.sum()
    if total <= 0:
        raise RegistrationError("volume has no nonzero intensities")
    idx = [np.arange(n, dtype=np.float64) for n in vol.shape]
    cx = (w.sum(axis=(1, 2)) * idx[0]).sum() / total
    cy = (w.sum(axis=(0, 2)) * idx[1]).sum() / total
    cz = (w.sum(axis=(0, 1)) * idx[2]).sum() / total
    vox = np.array([cx, cy, cz, 1.0])
    return (vol.affine @ vox)[:3]


def mask_centroid(mask) -> np.ndarray:
    """Binary-mask centroid in world coordinates."""
    m = np.asarray(mask.data, dtype=np.float64)
    total = m.sum()
    if total <= 0:
        raise RegistrationError("mask is empty")
    idx = np.argwhere(m > 0).mean(axis=0)
    vox = np.array([*idx, 1.0])
    return (np.asarray(mask.affine) @ vox)[:3]


def centroid_translation_init(fixed: Volume3D, moving: Volume3D) -> RigidTransform:
    """Translation mapping the moving centroid onto the fixed centroid."""
    return RigidTransform.from_translation(intensity_centroid(fixed) - intensity_centroid(moving))


def centroid_translation_from_masks(fixed_mask, moving_mask) -> RigidTransform:
    return RigidTransform.from_translation(mask_centroid(fixed_mask) - mask_centroid(moving_mask))


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = a.ravel().astype(np.float64)
    b = b.ravel().astype(np.float64)
    a = a - a.mean()
    b = b - b.mean()
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0:
        return -1.0
    return float(np.dot(a, b) / denom)


def _downsample(vol: Volume3D, factor: int) -> Volume3D:
    if factor == 1:
        return vol
    sigma = factor / 2.0
    smoothed = ndimage.gaussian_filter(np.asarray(vol.data, dtype=np.float64), sigma=sigma)
    data = smoothed[::factor, ::factor, ::factor]
    scale = np.diag([factor, factor, factor, 1.0])
    return Volume3D(
        data.astype(np.float32),
        tuple(s * factor for s in vol.spacing),
        np.asarray(vol.affine) @ scale,
    )


def _grid_center_world(vol: Volume3D) -> np.ndarray:
    center_vox = (np.array(vol.shape, dtype=np.float64) - 1) / 2.0
    return (np.asarray(vol.affine) @ np.array([*center_vox, 1.0]))[:3]


class _Parameterization:
    """Transform parameters about a fixed world-space center point.

    rigid: [rx, ry, rz, tx, ty, tz]
    affine: rigid + [log-scale x3, shear xy, xz, yz]
    """

    def __init__(self, mode: str, center: np.ndarray):
        if mode not in ("rigid", "affine"):
            raise RegistrationError(f"mode must be 'rigid' or 'affine', got {mode!r}")
        self.mode = mode
        self.center = center
        self.n_params = 6 if mode == "rigid" else 12

    def to_transform(self, params: np.ndarray):
        rx, ry, rz, tx, ty, tz = params[:6]
        rot = rotation_from_euler(rx, ry, rz)
        if self.mode == "rigid":
            linear = rot
        else:
            sx, sy, sz, kxy, kxz, kyz = params[6:12]
            shear = np.array([[1, kxy, kxz], [0, 1, kyz], [0, 0, 1.0]])
            linear = rot @ shear @ np.diag(np.exp([sx, sy, sz]))
        # p -> linear (p - c) + c + t
        offset = self.center + np.array([tx, ty, tz]) - linear @ self.center
        if self.mode == "rigid":
            return RigidTransform(rot, offset)
        m = np.eye(4)
        m[:3, :3] = linear
        m[:3, 3] = offset
        return AffineTransform(m)

    def initial_steps(self, spacing) -> np.ndarray:
        t_step = 2.0 * float(max(spacing))
        steps = [0.05, 0.05, 0.05, t_step, t_step, t_step]
        if self.mode == "affine":
            steps += [0.05, 0.05, 0.05, 0.05, 0.05, 0.05]
        return np.array(steps)

    def step_tolerance(self, spacing) -> np.ndarray:
        t_tol = 0.05 * float(min(spacing))
        tol = [1e-3, 1e-3, 1e-3, t_tol, t_tol, t_tol]
        if self.mode == "affine":
            tol += [1e-3] * 6
        return np.array(tol)


def _warp_cost(moving: Volume3D, fixed: Volume3D, transform) -> float:
    from .transforms import resample_like

    warped = resample_like(moving, transform, fixed, order=1)
    return normalized_cross_correlation(fixed.data, warped.data)


def register(
    fixed: Volume3D,
    moving: Volume3D,
    mode: str = "rigid",
    init: RigidTransform | AffineTransform | None = None,
    levels: int = 3,
    max_iterations: int = 200,
    min_similarity: float = 0.2,
) -> RegistrationResult:
    """Estimate the transform mapping moving-world onto fixed-world.

    Hill-climbing over transform parameters, coarse to fine. Returns the
    best transform found; `converged` is False when the iteration cap was
    hit before the steps shrank below tolerance, or when the final
    similarity stays below `min_similarity` (e.g. structureless inputs).
    """
    from .transforms import resample_like

    init = init if init is not None else RigidTransform.identity()
    center = _grid_center_world(fixed)
    par = _Parameterization(mode, center)

    # centroid init is a pure translation; it seeds the translation params
    params = np.zeros(par.n_params)
    init_m = init.as_matrix()
    if not np.allclose(init_m[:3, :3], np.eye(3), atol=1e-12):
        raise RegistrationError("init must be a pure translation")
    params[3:6] = init_m[:3, 3]

    warped0 = resample_like(moving, par.to_transform(params), fixed, order=1)
    if not np.any(warped0.data):
        raise RegistrationError("volumes do not overlap after init")

    factors = [2 ** (levels - 1 - i) for i in range(levels)]
    history: list[list[float]] = []
    total_iters = 0
    hit_cap = False
    for factor in factors:
        fixed_l = _downsample(fixed, factor)
        moving_l = _downsample(moving, factor)
        steps = par.initial_steps(fixed_l.spacing)
        tol = par.step_tolerance(fixed.spacing)
        best = _warp_cost(moving_l, fixed_l, par.to_transform(params))
        accepted = [best]
        iters = 0
        while iters < max_iterations:
            iters += 1
            improved = False
            for i in range(par.n_params):
                for sign in (+1.0, -1.0):
                    trial = params.copy()
                    trial[i] += sign * steps[i]
                    cost = _warp_cost(moving_l, fixed_l, par.to_transform(trial))
                    if cost > best + 1e-12:
                        best = cost
                        params = trial
                        accepted.append(best)
                        improved = True
                        break
            if not improved:
                steps /= 2.0
                if np.all(steps < tol):
                    break
        total_iters += iters
        if iters >= max_iterations:
            hit_cap = True
        history.append(accepted)

    transform = par.to_transform(params)
    final = _warp_cost(moving, fixed, transform)
    converged = (not hit_cap) and final >= min_similarity
    return RegistrationResult(
        transform=transform,
        similarity=final,
        converged=converged,
        iterations=total_iters,
        history=history,
    )
