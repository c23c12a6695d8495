"""Rigid/affine world-space transforms and grid resampling.

Convention: a transform maps points from the MOVING volume's world space
into the FIXED volume's world space. Resampling the moving volume onto a
fixed grid therefore pulls back through the inverse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume_io import LabelVolume, Volume3D


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray  # 3x3, orthonormal, det +1
    translation: np.ndarray  # 3-vector, mm

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if rot.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rot.shape}")
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        if np.linalg.det(rot) < 0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_translation(cls, t) -> "RigidTransform":
        return cls(np.eye(3), np.asarray(t, dtype=np.float64))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map world points, shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """self after other: (self . other)(x) = self(other(x))."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class AffineTransform:
    matrix: np.ndarray  # 4x4 homogeneous

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], [0, 0, 0, 1], atol=1e-12):
            raise ValueError("last row of an affine matrix must be (0,0,0,1)")
        if abs(np.linalg.det(m[:3, :3])) < 1e-12:
            raise ValueError("affine matrix is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    @classmethod
    def from_rigid(cls, rigid: RigidTransform) -> "AffineTransform":
        return cls(rigid.as_matrix())

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def inverse(self) -> "AffineTransform":
        return AffineTransform(np.linalg.inv(self.matrix))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        return AffineTransform(self.matrix @ other.matrix)

    def as_matrix(self) -> np.ndarray:
        return self.matrix.copy()


def rotation_from_euler(rx: float, ry: float, rz: float) -> np.ndarray:
    """Rotation composed in axis order x, y, z (radians)."""
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def world_matrix(transform) -> np.ndarray:
    if isinstance(transform, (RigidTransform, AffineTransform)):
        return transform.as_matrix()
    m = np.asarray(transform, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError("transform must be RigidTransform, AffineTransform, or 4x4 matrix")
    return m


def resample_to_grid(
    moving,
    transform,
    grid_shape,
    grid_affine,
    grid_spacing,
    order: int = 1,
    cval: float = 0.0,
):
    """Resample `moving` onto the target grid through `transform`.

    transform maps moving-world to grid-world; sampling pulls back with
    its inverse. order 1 = trilinear (images), order 0 = nearest (labels).
    """
    world = world_matrix(transform)
    # output voxel -> input voxel: A_m^-1 . T^-1 . A_g
    h = np.linalg.inv(moving.affine) @ np.linalg.inv(world) @ np.asarray(grid_affine)
    data = moving.data
    out_dtype = None
    if isinstance(moving, LabelVolume):
        order = 0
        out_dtype = data.dtype
        data = data.astype(np.float64)
    warped = ndimage.affine_transform(
        np.asarray(data, dtype=np.float64),
        matrix=h[:3, :3],
        offset=h[:3, 3],
        output_shape=tuple(int(s) for s in grid_shape),
        order=order,
        mode="constant",
        cval=cval,
    )
    if isinstance(moving, LabelVolume):
        return LabelVolume(
            warped.astype(out_dtype), grid_spacing, grid_affine, protocol_id=moving.protocol_id
        )
    return Volume3D(warped.astype(np.float32), grid_spacing, grid_affine)


def resample_like(moving, transform, reference, order: int = 1):
    return resample_to_grid(
        moving, transform, reference.shape, reference.affine, reference.spacing, order=order
    )


def warp_array_channels(
    channels: np.ndarray,
    transform,
    source_affine: np.ndarray,
    grid_shape,
    grid_affine,
    order: int = 1,
) -> np.ndarray:
    """Resample a (C, x, y, z) stack living on source_affine onto a grid."""
    world = world_matrix(transform)
    h = np.linalg.inv(source_affine) @ np.linalg.inv(world) @ np.asarray(grid_affine)
    out = np.empty((channels.shape[0], *[int(s) for s in grid_shape]), dtype=np.float64)
    for c in range(channels.shape[0]):
        out[c] = ndimage.affine_transform(
            np.asarray(channels[c], dtype=np.float64),
            matrix=h[:3, :3],
            offset=h[:3, 3],
            output_shape=tuple(int(s) for s in grid_shape),
            order=order,
            mode="constant",
            cval=0.0,
        )
    return out
