"""Model-ready patch production: atlas-fusion brain masks, template-space
resampling, skull stripping, intensity normalization, and crop/pad with
invertible geometry bookkeeping."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .registration import centroid_translation_from_masks, centroid_translation_init, register
from .transforms import RigidTransform, resample_to_grid
from .volume_io import LabelVolume, Volume3D, geometry_matches, read_label_volume, read_volume

DEFAULT_PATCH_SHAPE = (128, 160, 128)
DEFAULT_TARGET_SPACING = 0.8
GA_WINDOW_WEEKS = 1.5
MASK_FUSION_THRESHOLD = 0.5
DEFAULT_DILATION_VOXELS = 5


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class AtlasTemplate:
    volume: Volume3D
    brain_mask: LabelVolume
    ga: float

    def __post_init__(self):
        if not np.isfinite(self.ga):
            raise PreprocessError(f"template gestational age must be finite, got {self.ga}")
        if not geometry_matches(self.volume, self.brain_mask):
            raise PreprocessError("template volume and mask geometries differ")


@dataclass
class AtlasCollection:
    templates: list[AtlasTemplate]

    def __len__(self):
        return len(self.templates)

    @classmethod
    def load(cls, atlas_dir) -> "AtlasCollection":
        """Load an atlas directory: volumes + masks + templates.csv metadata.

        templates.csv columns: template, mask, ga_weeks (paths relative to
        the directory).
        """
        atlas_dir = Path(atlas_dir)
        meta = atlas_dir / "templates.csv"
        if not meta.exists():
            raise PreprocessError(f"atlas metadata not found: {meta}")
        templates = []
        with open(meta, newline="") as f:
            reader = csv.DictReader(f)
            required = {"template", "mask", "ga_weeks"}
            if reader.fieldnames is None or required - set(reader.fieldnames):
                raise PreprocessError(f"atlas metadata must have columns {sorted(required)}")
            for row in reader:
                vol = read_volume(atlas_dir / row["template"].strip())
                mask = read_label_volume(atlas_dir / row["mask"].strip())
                templates.append(AtlasTemplate(vol, mask, float(row["ga_weeks"])))
        if not templates:
            raise PreprocessError(f"atlas directory has no templates: {atlas_dir}")
        return cls(templates)


def select_templates(atlas: AtlasCollection, ga: float, window: float = GA_WINDOW_WEEKS):
    """All templates within `window` weeks of ga; nearest one as fallback."""
    if not atlas.templates:
        raise PreprocessError("atlas is empty")
    if not ga > 0:
        raise PreprocessError(f"gestational age must be positive, got {ga}")
    selected = [t for t in atlas.templates if abs(t.ga - ga) <= window]
    if selected:
        return selected
    nearest = min(atlas.templates, key=lambda t: abs(t.ga - ga))
    warnings.warn(
        f"no atlas template within {window} weeks of ga={ga}; "
        f"falling back to nearest template (ga={nearest.ga})",
        stacklevel=2,
    )
    return [nearest]


def compute_brain_mask(image: Volume3D, atlas: AtlasCollection, ga: float) -> LabelVolume:
    """Fuse affinely-warped template masks: average, then threshold at 0.5.

    Each selected template is registered to the image (affine, centroid
    translation init); its mask is warped with trilinear interpolation and
    the voxelwise average is thresholded (mask = average >= 0.5).
    """
    selected = select_templates(atlas, ga)
    accum = np.zeros(image.shape, dtype=np.float64)
    for template in selected:
        init = centroid_translation_init(image, template.volume)
        result = register(image, template.volume, mode="affine", init=init)
        mask_float = Volume3D(
            template.brain_mask.data.astype(np.float32),
            template.brain_mask.spacing,
            template.brain_mask.affine,
        )
        warped = resample_to_grid(
            mask_float, result.transform, image.shape, image.affine, image.spacing, order=1
        )
        accum += warped.data
    fused = (accum / len(selected)) >= MASK_FUSION_THRESHOLD
    return LabelVolume(fused.astype(np.uint8), image.spacing, image.affine)


def isotropic_grid_like(reference: Volume3D, spacing: float):
    """Grid with the reference's origin/orientation at isotropic spacing."""
    ref_affine = np.asarray(reference.affine)
    directions = ref_affine[:3, :3] / np.array(reference.spacing)[np.newaxis, :]
    new_affine = np.eye(4)
    new_affine[:3, :3] = directions * spacing
    new_affine[:3, 3] = ref_affine[:3, 3]
    # tolerance absorbs the float32 quantization of stored spacings
    shape = tuple(
        int(np.ceil(n * s / spacing - 1e-6)) for n, s in zip(reference.shape, reference.spacing)
    )
    return shape, new_affine, (spacing, spacing, spacing)


def to_template_space(
    image: Volume3D,
    mask: LabelVolume,
    atlas_template: Volume3D,
    template_mask: LabelVolume | None = None,
    target_spacing: float = DEFAULT_TARGET_SPACING,
    rigid: RigidTransform | None = None,
):
    """Rigidly register the image to the template and resample isotropically.

    Returns (image, mask, rigid) on the template-space grid at
    `target_spacing`. The rigid transform maps image-world onto
    template-world and is kept for post-processing inversion. Pass `rigid`
    to skip registration (e.g. a precomputed or identity transform).
    """
    if not np.any(mask.data):
        raise PreprocessError("brain mask is empty")
    if rigid is None:
        if template_mask is not None:
            fixed_mask = template_mask
        else:
            fixed_mask = LabelVolume(
                (atlas_template.data != 0).astype(np.uint8),
                atlas_template.spacing,
                atlas_template.affine,
            )
        init = centroid_translation_from_masks(fixed_mask, mask)
        result = register(atlas_template, image, mode="rigid", init=init)
        rigid = result.transform
    shape, affine, spacing = isotropic_grid_like(atlas_template, target_spacing)
    resampled = resample_to_grid(image, rigid, shape, affine, spacing, order=1)
    resampled_mask = resample_to_grid(mask, rigid, shape, affine, spacing)
    return resampled, resampled_mask, rigid


def skull_strip(
    image: Volume3D, mask: LabelVolume, dilation_voxels: int = DEFAULT_DILATION_VOXELS
) -> Volume3D:
    """Zero all voxels outside the mask dilated by `dilation_voxels` steps
    of 6-connected morphological dilation."""
    if not geometry_matches(image, mask):
        raise PreprocessError("image and mask are not on the same grid")
    binary = mask.data > 0
    if dilation_voxels > 0:
        structure = ndimage.generate_binary_structure(3, 1)
        binary = ndimage.binary_dilation(binary, structure=structure, iterations=dilation_voxels)
    return Volume3D(image.data * binary.astype(np.float32), image.spacing, image.affine)


def percentile_linear(values: np.ndarray, q: float) -> float:
    """Linear-interpolation percentile over sorted values."""
    s = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if s.size == 0:
        raise PreprocessError("percentile of empty value set")
    h = (s.size - 1) * (q / 100.0)
    f = int(np.floor(h))
    c = min(f + 1, s.size - 1)
    t = h - f
    return float(s[f] + (s[c] - s[f]) * t)


CLIP_PERCENTILE = 99.9


def normalize_intensity(image: Volume3D) -> Volume3D:
    """Clip nonzero intensities above the 99.9th percentile, then zero-mean
    unit-variance normalize over the nonzero voxels. Zero voxels stay zero."""
    data = np.asarray(image.data, dtype=np.float64)
    nonzero = data != 0
    if not np.any(nonzero):
        raise PreprocessError("cannot normalize an all-zero image")
    values = data[nonzero]
    threshold = percentile_linear(values, CLIP_PERCENTILE)
    clipped = np.minimum(values, threshold)
    mean = clipped.mean()
    std = clipped.std()
    if std == 0:
        raise PreprocessError("zero intensity variance after clipping")
    out = np.zeros_like(data)
    out[nonzero] = (clipped - mean) / std
    return Volume3D(out.astype(np.float32), image.spacing, image.affine)


@dataclass(frozen=True)
class PatchGeometry:
    """Bookkeeping to undo crop/pad and return to the native grid."""

    original_shape: tuple[int, int, int]
    crop_low: tuple[int, int, int]
    crop_high: tuple[int, int, int]
    pad_low: tuple[int, int, int]
    pad_high: tuple[int, int, int]
    rigid: RigidTransform
    target_spacing: tuple[float, float, float]
    grid_affine: np.ndarray  # pre-crop template-grid voxel-to-world

    @property
    def patch_shape(self):
        return tuple(
            n - cl - ch + pl + ph
            for n, cl, ch, pl, ph in zip(
                self.original_shape, self.crop_low, self.crop_high, self.pad_low, self.pad_high
            )
        )

    def patch_affine(self) -> np.ndarray:
        shift = np.eye(4)
        shift[:3, 3] = [c - p for c, p in zip(self.crop_low, self.pad_low)]
        return np.asarray(self.grid_affine) @ shift

    def restore(self, patch: np.ndarray, fill=0) -> np.ndarray:
        """Invert crop/pad on a 3D array or channel-first (C, x, y, z) stack."""
        spatial = patch.shape[-3:]
        if tuple(spatial) != tuple(self.patch_shape):
            raise PreprocessError(
                f"patch shape {spatial} does not match geometry {self.patch_shape}"
            )
        unpad = tuple(
            slice(pl, n - ph) for pl, ph, n in zip(self.pad_low, self.pad_high, spatial)
        )
        core = patch[(..., *unpad)]
        pad_spec = [(0, 0)] * (patch.ndim - 3) + [
            (cl, ch) for cl, ch in zip(self.crop_low, self.crop_high)
        ]
        return np.pad(core, pad_spec, mode="constant", constant_values=fill)

    def to_dict(self) -> dict:
        return {
            "format": 1,
            "original_shape": list(self.original_shape),
            "crop_low": list(self.crop_low),
            "crop_high": list(self.crop_high),
            "pad_low": list(self.pad_low),
            "pad_high": list(self.pad_high),
            "rigid_matrix": self.rigid.as_matrix().tolist(),  # row-major, mm
            "target_spacing": list(self.target_spacing),
            "grid_affine": np.asarray(self.grid_affine).tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatchGeometry":
        m = np.asarray(d["rigid_matrix"], dtype=np.float64)
        rigid = RigidTransform(m[:3, :3], m[:3, 3])
        return cls(
            original_shape=tuple(d["original_shape"]),
            crop_low=tuple(d["crop_low"]),
            crop_high=tuple(d["crop_high"]),
            pad_low=tuple(d["pad_low"]),
            pad_high=tuple(d["pad_high"]),
            rigid=rigid,
            target_spacing=tuple(d["target_spacing"]),
            grid_affine=np.asarray(d["grid_affine"], dtype=np.float64),
        )


def save_geometry(geometry: PatchGeometry, path) -> None:
    with open(path, "w") as f:
        json.dump(geometry.to_dict(), f, indent=2)


def load_geometry(path) -> PatchGeometry:
    path = Path(path)
    if not path.exists():
        raise PreprocessError(f"geometry sidecar not found: {path}")
    with open(path) as f:
        return PatchGeometry.from_dict(json.load(f))


def _split_amount(total: int) -> tuple[int, int]:
    low = total // 2
    return low, total - low


def crop_or_pad(
    volume,
    patch_shape=DEFAULT_PATCH_SHAPE,
    rigid: RigidTransform | None = None,
    target_spacing=None,
):
    """Center-crop and/or symmetrically zero-pad to `patch_shape`.

    Odd amounts put the smaller share on the low side. Returns the patch
    (same carrier type) and the PatchGeometry holding the exact inverse.
    """
    data = volume.data
    crop_low, crop_high, pad_low, pad_high = [], [], [], []
    for n, target in zip(data.shape, patch_shape):
        if n > target:
            lo, hi = _split_amount(n - target)
            crop_low.append(lo)
            crop_high.append(hi)
            pad_low.append(0)
            pad_high.append(0)
        else:
            lo, hi = _split_amount(target - n)
            crop_low.append(0)
            crop_high.append(0)
            pad_low.append(lo)
            pad_high.append(hi)

    geometry = PatchGeometry(
        original_shape=tuple(data.shape),
        crop_low=tuple(crop_low),
        crop_high=tuple(crop_high),
        pad_low=tuple(pad_low),
        pad_high=tuple(pad_high),
        rigid=rigid if rigid is not None else RigidTransform.identity(),
        target_spacing=tuple(target_spacing) if target_spacing else volume.spacing,
        grid_affine=np.asarray(volume.affine),
    )
    sliced = data[
        tuple(slice(cl, n - ch) for cl, ch, n in zip(crop_low, crop_high, data.shape))
    ]
    padded = np.pad(sliced, list(zip(pad_low, pad_high)), mode="constant")
    affine = geometry.patch_affine()
    if isinstance(volume, LabelVolume):
        patch = LabelVolume(padded, volume.spacing, affine, protocol_id=volume.protocol_id)
    else:
        patch = Volume3D(padded, volume.spacing, affine)
    return patch, geometry


@dataclass
class PreprocessedCase:
    case_id: str
    image_patch: Volume3D
    mask_patch: LabelVolume
    geometry: PatchGeometry
    label_patch: LabelVolume | None = None


def preprocess_case(
    case_id: str,
    image: Volume3D,
    atlas: AtlasCollection | None = None,
    ga: float | None = None,
    labels: LabelVolume | None = None,
    mask: LabelVolume | None = None,
    patch_shape=DEFAULT_PATCH_SHAPE,
    target_spacing: float = DEFAULT_TARGET_SPACING,
    dilation_voxels: int = DEFAULT_DILATION_VOXELS,
    rigid: RigidTransform | None = None,
) -> PreprocessedCase:
    """Full per-case pipeline: mask, template-space resampling, skull strip,
    normalization, crop/pad. Labels, when given, ride along with
    nearest-neighbor interpolation.

    Without an atlas the image's own grid serves as template space (used
    with a precomputed/identity rigid transform).
    """
    if mask is None:
        if atlas is None or ga is None:
            raise PreprocessError(
                f"case {case_id}: computing a brain mask requires an atlas and ga_weeks"
            )
        mask = compute_brain_mask(image, atlas, ga)

    if atlas is not None:
        if ga is None:
            raise PreprocessError(f"case {case_id}: template selection requires ga_weeks")
        candidates = select_templates(atlas, ga)
        template = min(candidates, key=lambda t: abs(t.ga - ga))
        resampled, mask_r, rigid = to_template_space(
            image, mask, template.volume, template.brain_mask, target_spacing, rigid=rigid
        )
    else:
        rigid = rigid if rigid is not None else RigidTransform.identity()
        shape, affine, spacing = isotropic_grid_like(image, target_spacing)
        resampled = resample_to_grid(image, rigid, shape, affine, spacing, order=1)
        mask_r = resample_to_grid(mask, rigid, shape, affine, spacing)

    stripped = skull_strip(resampled, mask_r, dilation_voxels)
    normalized = normalize_intensity(stripped)
    patch, geometry = crop_or_pad(
        normalized, patch_shape, rigid=rigid, target_spacing=resampled.spacing
    )
    mask_patch, _ = crop_or_pad(mask_r, patch_shape, rigid=rigid)

    label_patch = None
    if labels is not None:
        labels_r = resample_to_grid(
            labels, rigid, resampled.shape, resampled.affine, resampled.spacing
        )
        label_patch, _ = crop_or_pad(labels_r, patch_shape, rigid=rigid)

    return PreprocessedCase(
        case_id=case_id,
        image_patch=patch,
        mask_patch=mask_patch,
        geometry=geometry,
        label_patch=label_patch,
    )
