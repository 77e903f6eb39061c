"""Rigid transforms, displacement fields and their Jacobians.

Displacement fields live on the fixed-image grid and pull back: the warped
image at ``x`` is the source sampled at ``x + u(x)``. ``u`` is stored in
millimetres with channels ``(u_x, u_y, u_z)``.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from cbct_toxicity.interpolation import identity_grid, sample_trilinear
from cbct_toxicity.volio import Vec3, Volume, require_same_grid

logger = logging.getLogger(__name__)

DEFAULT_DEFORMATION_EPS = 1e-6


class JacobianGridError(ValueError):
    pass


@dataclass(frozen=True)
class DisplacementField(Volume):
    def __post_init__(self):
        super().__post_init__()
        if self.channels != 3:
            raise ValueError(f"Displacement field needs 3 channels, got {self.channels}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Displacement field contains non-finite values")

    @classmethod
    def from_volume(cls, vol: Volume) -> "DisplacementField":
        if isinstance(vol, cls):
            return vol
        return cls(vol.data, vol.spacing_mm, vol.origin_mm)

    @classmethod
    def zeros(cls, like: Volume, dtype=np.float32) -> "DisplacementField":
        return cls(np.zeros((3,) + like.shape_zyx, dtype=dtype), like.spacing_mm, like.origin_mm)

    @classmethod
    def translation(cls, like: Volume, vector_mm: Sequence[float]) -> "DisplacementField":
        data = np.empty((3,) + like.shape_zyx, dtype=np.float64)
        for axis in range(3):
            data[axis] = vector_mm[axis]
        return cls(data, like.spacing_mm, like.origin_mm)

    def magnitude(self) -> np.ndarray:
        """Per-voxel ``|u|`` in mm, shaped ``(z, y, x)``."""
        return np.sqrt((self.data.astype(np.float64) ** 2).sum(axis=0))


@dataclass(frozen=True)
class JacobianField(Volume):
    """Per-voxel 3x3 matrices in row-major channels ``J11, J12, ..., J33``."""

    def __post_init__(self):
        super().__post_init__()
        if self.channels != 9:
            raise ValueError(f"Jacobian field needs 9 channels, got {self.channels}")

    @classmethod
    def from_volume(cls, vol: Volume) -> "JacobianField":
        if isinstance(vol, cls):
            return vol
        return cls(vol.data, vol.spacing_mm, vol.origin_mm)

    def matrices(self) -> np.ndarray:
        """``(z, y, x, 3, 3)`` view of the field."""
        stacked = self.data.astype(np.float64).reshape((3, 3) + self.shape_zyx)
        return np.moveaxis(stacked, (0, 1), (-2, -1))


def _rotation_matrix(rotation: Vec3) -> np.ndarray:
    rx, ry, rz = rotation
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    r_x = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    r_y = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    r_z = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    return r_z @ r_y @ r_x


def _euler_from_matrix(matrix: np.ndarray) -> Vec3:
    sy = -matrix[2, 0]
    ry = float(np.arcsin(np.clip(sy, -1.0, 1.0)))
    if abs(sy) < 1.0 - 1e-12:
        rx = float(np.arctan2(matrix[2, 1], matrix[2, 2]))
        rz = float(np.arctan2(matrix[1, 0], matrix[0, 0]))
    else:
        # gimbal lock, fold everything into rz
        rx = 0.0
        rz = float(np.arctan2(-matrix[0, 1], matrix[1, 1]))
    return (rx, ry, rz)


@dataclass(frozen=True)
class RigidTransform:
    """``T(p) = R (p - c) + c + t`` with ``R = Rz Ry Rx``; angles in radians."""

    rotation: Vec3 = (0.0, 0.0, 0.0)
    translation_mm: Vec3 = (0.0, 0.0, 0.0)
    center_mm: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        for name in ("rotation", "translation_mm", "center_mm"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 3:
                raise ValueError(f"{name} must have 3 components, got {len(value)}")
            object.__setattr__(self, name, value)

    @classmethod
    def identity(cls, center_mm: Vec3 = (0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(center_mm=center_mm)

    @classmethod
    def from_matrix(
        cls, matrix: np.ndarray, translation_mm: Sequence[float], center_mm: Sequence[float]
    ) -> "RigidTransform":
        return cls(
            _euler_from_matrix(np.asarray(matrix, dtype=np.float64)),
            tuple(translation_mm),
            tuple(center_mm),
        )

    def matrix(self) -> np.ndarray:
        return _rotation_matrix(self.rotation)

    def parameters(self) -> np.ndarray:
        return np.array(self.rotation + self.translation_mm)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        """Apply to ``(3, ...)`` physical points."""
        points = np.asarray(points, dtype=np.float64)
        shape = (3,) + (1,) * (points.ndim - 1)
        center = np.reshape(self.center_mm, shape)
        rotated = np.tensordot(self.matrix(), points - center, axes=(1, 0))
        return rotated + center + np.reshape(self.translation_mm, shape)

    def inverse(self) -> "RigidTransform":
        rt = self.matrix().T
        return RigidTransform.from_matrix(rt, -rt @ np.asarray(self.translation_mm), self.center_mm)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``; the result keeps ``other``'s center."""
        r1, r2 = self.matrix(), other.matrix()
        c1, c2 = np.asarray(self.center_mm), np.asarray(other.center_mm)
        t1, t2 = np.asarray(self.translation_mm), np.asarray(other.translation_mm)
        translation = r1 @ (c2 + t2 - c1) + c1 + t1 - c2
        return RigidTransform.from_matrix(r1 @ r2, translation, other.center_mm)

    def to_dict(self) -> Dict[str, list]:
        return {
            "rotation_rad": list(self.rotation),
            "translation_mm": list(self.translation_mm),
            "center_mm": list(self.center_mm),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Sequence[float]]) -> "RigidTransform":
        return cls(
            tuple(data["rotation_rad"]), tuple(data["translation_mm"]), tuple(data["center_mm"])
        )


def apply_rigid(
    vol: Volume, transform: RigidTransform, reference: Optional[Volume] = None
) -> Volume:
    """Pull ``vol`` back through ``transform``; output lies on ``reference``'s grid."""
    reference = vol if reference is None else reference
    points = reference.physical_grid()
    source = vol.physical_to_voxel(transform.inverse().map_points(points))
    data = sample_trilinear(vol.data, source).astype(vol.data.dtype)
    return Volume(data, reference.spacing_mm, reference.origin_mm)


def _displaced_coordinates(dvf: DisplacementField) -> np.ndarray:
    spacing = np.reshape(dvf.spacing_mm, (3, 1, 1, 1))
    return identity_grid(dvf.shape_zyx) + dvf.data.astype(np.float64) / spacing


def warp(vol: Volume, dvf: Volume) -> Volume:
    dvf = DisplacementField.from_volume(dvf)
    require_same_grid(vol, dvf, "volume and displacement field")
    data = sample_trilinear(vol.data, _displaced_coordinates(dvf)).astype(vol.data.dtype)
    return vol.like(data)


def compose(u_first: Volume, u_second: Volume) -> DisplacementField:
    """Field equivalent to warping by ``u_first`` and then by ``u_second``."""
    u_first = DisplacementField.from_volume(u_first)
    u_second = DisplacementField.from_volume(u_second)
    require_same_grid(u_first, u_second, "displacement fields")
    sampled = sample_trilinear(u_first.data, _displaced_coordinates(u_second))
    dtype = np.result_type(u_first.data.dtype, u_second.data.dtype)
    return DisplacementField(
        (u_second.data + sampled).astype(dtype), u_second.spacing_mm, u_second.origin_mm
    )


def through_rigid(dvf: Volume, transform: RigidTransform) -> DisplacementField:
    """Field ``p -> T^-1(p + u(p)) - p``.

    ``dvf`` pulls back from ``apply_rigid(moving, transform)``; the result pulls back
    from ``moving`` itself.
    """
    dvf = DisplacementField.from_volume(dvf)
    points = dvf.physical_grid()
    mapped = transform.inverse().map_points(points + dvf.data.astype(np.float64))
    return DisplacementField(mapped - points, dvf.spacing_mm, dvf.origin_mm)


def jacobian_field(dvf: Volume) -> JacobianField:
    """``J = I + du/dx`` in mm/mm, central differences inside, one-sided at borders."""
    dvf = DisplacementField.from_volume(dvf)
    if min(dvf.dims) < 3:
        raise JacobianGridError(f"Jacobian needs at least 3 voxels per axis, got {dvf.dims}")
    sx, sy, sz = dvf.spacing_mm
    data = np.empty((9,) + dvf.shape_zyx, dtype=np.float64)
    for row in range(3):
        d_dz, d_dy, d_dx = np.gradient(
            dvf.data[row].astype(np.float64), sz, sy, sx, edge_order=1
        )
        for col, derivative in enumerate((d_dx, d_dy, d_dz)):
            data[3 * row + col] = derivative + (1.0 if row == col else 0.0)
    return JacobianField(data, dvf.spacing_mm, dvf.origin_mm)


def jacobian_determinant(jf: Volume) -> Volume:
    jf = JacobianField.from_volume(jf)
    det = np.linalg.det(jf.matrices())
    return jf.like(det[np.newaxis])


def _deviation(jf: JacobianField) -> np.ndarray:
    return np.linalg.norm(jf.matrices() - np.eye(3), ord="fro", axis=(-2, -1))


def deformed_fraction(jf: Volume, eps: float = DEFAULT_DEFORMATION_EPS) -> float:
    """Fraction of voxels where ``||J - I||_F > eps``."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    deviation = _deviation(JacobianField.from_volume(jf))
    return float(np.count_nonzero(deviation > eps) / deviation.size)


def jacobian_summary(jf: Volume, eps: float = DEFAULT_DEFORMATION_EPS) -> Dict[str, float]:
    jf = JacobianField.from_volume(jf)
    det = jacobian_determinant(jf).data[0]
    return {
        "deformed_fraction": deformed_fraction(jf, eps),
        "det_min": float(det.min()),
        "det_max": float(det.max()),
        "det_mean": float(det.mean()),
        "folding_fraction": float(np.count_nonzero(det <= 0) / det.size),
    }
