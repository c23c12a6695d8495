"""Minimal single-file NIfTI-1 reader/writer (.nii and .nii.gz)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
# single-file data offset: 348-byte header + 4-byte extension flag
DATA_OFFSET = 352

# NIfTI-1 datatype codes
_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
}
_CODE_FOR_DTYPE = {np.dtype(v): k for k, v in _DTYPE_CODES.items()}


class NiftiError(IOError):
    """Malformed, unsupported, or unreadable NIfTI file."""


def _open_maybe_gzip(path: Path, mode: str):
    if "r" in mode:
        with open(path, "rb") as f:
            magic = f.read(2)
        if magic == b"\x1f\x8b":
            return gzip.open(path, mode)
        return open(path, mode)
    if path.name.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def _quaternion_rotation(b: float, c: float, d: float) -> np.ndarray:
    a2 = 1.0 - (b * b + c * c + d * d)
    a = np.sqrt(max(a2, 0.0))
    return np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float], np.ndarray]:
    """Read a single-file NIfTI-1 volume.

    Returns (data, spacing, affine) where data is a 3D array in on-disk
    dtype (scaled to float32 if scl_slope/inter are set), spacing is the
    voxel size in mm, and affine is the 4x4 voxel-to-world matrix.

    A 4D file with a singleton last axis is squeezed to 3D; any other
    dimensionality is rejected.
    """
    path = Path(path)
    if not path.exists():
        raise NiftiError(f"file not found: {path}")
    with _open_maybe_gzip(path, "rb") as f:
        raw = f.read()
    if len(raw) < DATA_OFFSET:
        raise NiftiError(f"file too short for a NIfTI-1 header: {path}")

    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr == HEADER_SIZE:
        end = "<"
    elif struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
        end = ">"
    else:
        raise NiftiError(f"bad sizeof_hdr, not a NIfTI-1 file: {path}")

    (magic,) = struct.unpack_from(end + "4s", raw, 344)
    if magic not in (b"n+1\x00",):
        raise NiftiError(f"unsupported magic {magic!r} (only single-file NIfTI-1): {path}")

    dim = struct.unpack_from(end + "8h", raw, 40)
    ndim = dim[0]
    if ndim == 4 and dim[4] == 1:
        shape = tuple(dim[1:4])
    elif ndim == 3:
        shape = tuple(dim[1:4])
    else:
        raise NiftiError(
            f"expected a 3D volume (or 4D with singleton last axis), "
            f"got dim={dim[: ndim + 1]}: {path}"
        )
    if any(s < 1 for s in shape):
        raise NiftiError(f"non-positive dimension in {shape}: {path}")

    (datatype,) = struct.unpack_from(end + "h", raw, 70)
    if datatype not in _DTYPE_CODES:
        raise NiftiError(f"unsupported datatype code {datatype}: {path}")
    dtype = np.dtype(_DTYPE_CODES[datatype]).newbyteorder(end)

    pixdim = struct.unpack_from(end + "8f", raw, 76)
    (vox_offset,) = struct.unpack_from(end + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(end + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(end + "2h", raw, 252)

    offset = int(vox_offset) if vox_offset >= DATA_OFFSET else DATA_OFFSET
    n_vox = int(np.prod(shape)) * (1 if ndim == 3 else dim[4])
    nbytes = n_vox * dtype.itemsize
    if len(raw) < offset + nbytes:
        raise NiftiError(f"truncated data section: {path}")
    data = np.frombuffer(raw, dtype=dtype, count=n_vox, offset=offset)
    data = data.reshape(shape, order="F").copy()

    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data.astype(np.float32) * np.float32(slope) + np.float32(scl_inter)

    affine = _affine_from_header(end, raw, pixdim, qform_code, sform_code)
    spacing = tuple(float(p) for p in pixdim[1:4])
    if any(s <= 0 for s in spacing):
        spacing = tuple(float(np.linalg.norm(affine[:3, i])) for i in range(3))
    if any(s <= 0 for s in spacing):
        raise NiftiError(f"cannot determine positive voxel spacing: {path}")
    return data, spacing, affine


def _affine_from_header(end, raw, pixdim, qform_code, sform_code) -> np.ndarray:
    affine = np.eye(4)
    if sform_code > 0:
        srow = struct.unpack_from(end + "12f", raw, 280)
        affine[0, :] = srow[0:4]
        affine[1, :] = srow[4:8]
        affine[2, :] = srow[8:12]
    elif qform_code > 0:
        b, c, d = struct.unpack_from(end + "3f", raw, 256)
        qoffset = struct.unpack_from(end + "3f", raw, 268)
        rot = _quaternion_rotation(b, c, d)
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        scale = np.array([pixdim[1], pixdim[2], pixdim[3] * qfac])
        affine[:3, :3] = rot * scale[np.newaxis, :]
        affine[:3, 3] = qoffset
    else:
        affine[0, 0], affine[1, 1], affine[2, 2] = pixdim[1:4]
    return affine


def write_nifti(path, data: np.ndarray, spacing, affine: np.ndarray) -> None:
    """Write a 3D array as a single-file NIfTI-1 volume (gzipped if *.gz)."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim != 3:
        raise NiftiError(f"only 3D volumes are written, got shape {data.shape}")
    if data.dtype not in _CODE_FOR_DTYPE:
        raise NiftiError(f"unsupported on-disk dtype {data.dtype}")
    affine = np.asarray(affine, dtype=np.float64)

    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<8h", hdr, 40, 3, data.shape[0], data.shape[1], data.shape[2], 1, 1, 1, 1)
    code = _CODE_FOR_DTYPE[data.dtype]
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, data.dtype.itemsize * 8)
    struct.pack_into(
        "<8f", hdr, 76, 1.0, float(spacing[0]), float(spacing[1]), float(spacing[2]), 0, 0, 0, 0
    )
    struct.pack_into("<f", hdr, 108, float(DATA_OFFSET))
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # spatial units: mm
    struct.pack_into("<2h", hdr, 252, 0, 2)  # no qform, sform "aligned"
    struct.pack_into("<4f", hdr, 280, *affine[0, :])
    struct.pack_into("<4f", hdr, 296, *affine[1, :])
    struct.pack_into("<4f", hdr, 312, *affine[2, :])
    struct.pack_into("<4s", hdr, 344, b"n+1\x00")

    try:
        with _open_maybe_gzip(path, "wb") as f:
            f.write(bytes(hdr))
            f.write(b"\x00\x00\x00\x00")
            f.write(data.tobytes(order="F"))
    except OSError as exc:
        raise NiftiError(f"cannot write {path}: {exc}") from exc
