"""Volumetric image/label carriers, NIfTI-backed I/O, and dataset manifests."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nifti

GEOMETRY_TOL = 1e-6

# on-disk field names of the manifest table, fixed
MANIFEST_FIELDS = ("case_id", "image", "labels", "mask", "protocol", "ga_weeks")


class VolumeIOError(IOError):
    pass


class ManifestError(ValueError):
    pass


def _normalize_geometry(spacing, affine):
    """Quantize geometry through float32, the precision of the NIfTI-1 header.

    Keeps write -> read round trips lossless regardless of magnitude.
    """
    spacing = tuple(float(np.float32(s)) for s in spacing)
    affine = np.asarray(affine, dtype=np.float64)
    affine = np.float32(affine).astype(np.float64)
    return spacing, affine


def _validate_geometry(data, spacing, affine):
    if data.ndim != 3:
        raise VolumeIOError(f"volume data must be 3D, got shape {data.shape}")
    if any(s < 1 for s in data.shape):
        raise VolumeIOError(f"every axis must have extent >= 1, got {data.shape}")
    if any(s <= 0 for s in spacing):
        raise VolumeIOError(f"voxel spacing must be positive, got {spacing}")
    if affine.shape != (4, 4):
        raise VolumeIOError(f"affine must be 4x4, got {affine.shape}")
    if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
        raise VolumeIOError("affine is not invertible")


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar image with voxel spacing (mm) and voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype != np.float32:
            data = data.astype(np.float32)
        spacing, affine = _normalize_geometry(self.spacing, self.affine)
        _validate_geometry(data, spacing, affine)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    """A 3D map of non-negative integer label ids with image geometry."""

    data: np.ndarray
    spacing: tuple[float, float, float]
    affine: np.ndarray
    protocol_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype.kind not in "iu":
            if not np.allclose(data, np.round(data), atol=1e-6):
                raise VolumeIOError("label data is not integral")
            data = np.round(data).astype(np.int32)
        if data.size and data.min() < 0:
            raise VolumeIOError("label ids must be non-negative")
        spacing, affine = _normalize_geometry(self.spacing, self.affine)
        _validate_geometry(data, spacing, affine)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class ManifestEntry:
    case_id: str
    image_path: Path
    label_path: Path | None = None
    mask_path: Path | None = None
    protocol_id: str = ""
    gestational_age: float | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def case_ids(self):
        return [e.case_id for e in self.entries]


def read_volume(path) -> Volume3D:
    """Read a single-volume NIfTI-1 file as a float32 intensity volume."""
    try:
        data, spacing, affine = nifti.read_nifti(path)
    except nifti.NiftiError as exc:
        raise VolumeIOError(str(exc)) from exc
    return Volume3D(data.astype(np.float32), spacing, affine)


def read_label_volume(path, protocol_id: str = "") -> LabelVolume:
    try:
        data, spacing, affine = nifti.read_nifti(path)
    except nifti.NiftiError as exc:
        raise VolumeIOError(str(exc)) from exc
    return LabelVolume(data, spacing, affine, protocol_id=protocol_id)


def _label_disk_dtype(max_id: int):
    if max_id <= np.iinfo(np.uint8).max:
        return np.uint8
    if max_id <= np.iinfo(np.uint16).max:
        return np.uint16
    return np.uint32


def write_volume(vol: Volume3D | LabelVolume, path) -> None:
    """Write a volume as NIfTI-1; labels get an integer on-disk type."""
    path = Path(path)
    if isinstance(vol, LabelVolume):
        max_id = int(vol.data.max()) if vol.data.size else 0
        data = vol.data.astype(_label_disk_dtype(max_id))
    else:
        data = vol.data.astype(np.float32)
    try:
        nifti.write_nifti(path, data, vol.spacing, vol.affine)
    except nifti.NiftiError as exc:
        raise VolumeIOError(str(exc)) from exc


def geometry_matches(a, b, tol: float = GEOMETRY_TOL) -> bool:
    return (
        a.shape == b.shape
        and np.allclose(a.spacing, b.spacing, atol=tol)
        and np.allclose(a.affine, b.affine, atol=tol)
    )


def load_case(entry: ManifestEntry):
    """Load the (image, labels, mask) triple for one manifest entry.

    Any label or mask volume must match the image geometry exactly
    (shape) and to within 1e-6 (spacing, affine).
    """
    image = read_volume(entry.image_path)
    labels = mask = None
    if entry.label_path is not None:
        labels = read_label_volume(entry.label_path, protocol_id=entry.protocol_id)
        if not geometry_matches(image, labels):
            raise VolumeIOError(
                f"case {entry.case_id}: label geometry does not match image geometry"
            )
    if entry.mask_path is not None:
        mask = read_label_volume(entry.mask_path)
        if not geometry_matches(image, mask):
            raise VolumeIOError(
                f"case {entry.case_id}: mask geometry does not match image geometry"
            )
    return image, labels, mask


def load_manifest(path, known_protocols=None) -> DatasetManifest:
    """Load a manifest table (CSV with the fixed field names).

    known_protocols: collection of registered protocol/mapping names. When
    omitted, the built-in registry from fetalseg.labelset is used.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    if known_protocols is None:
        from .labelset import builtin_registry

        known_protocols = set(builtin_registry().mapping_names())

    entries = []
    seen = set()
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ManifestError(f"empty manifest: {path}")
        missing = {"case_id", "image", "protocol"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"manifest missing required fields {sorted(missing)}: {path}")
        unknown = set(reader.fieldnames) - set(MANIFEST_FIELDS)
        if unknown:
            raise ManifestError(f"manifest has unknown fields {sorted(unknown)}: {path}")
        for i, row in enumerate(reader, start=2):
            case_id = (row.get("case_id") or "").strip()
            image = (row.get("image") or "").strip()
            protocol = (row.get("protocol") or "").strip()
            if not case_id or not image or not protocol:
                raise ManifestError(f"line {i}: case_id, image, and protocol are required")
            if case_id in seen:
                raise ManifestError(f"line {i}: duplicate case_id {case_id!r}")
            seen.add(case_id)
            if protocol not in known_protocols:
                raise ManifestError(f"line {i}: unknown protocol {protocol!r}")
            labels = (row.get("labels") or "").strip() or None
            mask = (row.get("mask") or "").strip() or None
            ga = (row.get("ga_weeks") or "").strip()
            base = path.parent
            entries.append(
                ManifestEntry(
                    case_id=case_id,
                    image_path=_resolve(base, image),
                    label_path=_resolve(base, labels) if labels else None,
                    mask_path=_resolve(base, mask) if mask else None,
                    protocol_id=protocol,
                    gestational_age=float(ga) if ga else None,
                )
            )
    return DatasetManifest(entries=entries)


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q
