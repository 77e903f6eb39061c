"""Trilinear sampling with border clamping.

One sampler serves warping, rigid resampling, field composition, isotropic
resampling, landmark lookup and the differentiable spatial transformer, so all
of them agree voxel for voxel. Coordinates are voxel indices ordered
``(x, y, z)``; volumes are laid out ``(C, z, y, x)``.
"""

from itertools import product
from typing import List, Tuple

import numpy as np


class TrilinearSampler:
    def __init__(self, shape_zyx: Tuple[int, int, int], coords: np.ndarray):
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[0] != 3:
            raise ValueError(f"Expected (3, ...) coordinates, got {coords.shape}")
        self.shape_zyx = tuple(int(s) for s in shape_zyx)
        self.out_shape = coords.shape[1:]
        nz, ny, nx = self.shape_zyx
        self.size = nz * ny * nx

        lower: List[np.ndarray] = []
        upper: List[np.ndarray] = []
        fracs: List[np.ndarray] = []
        self.inside: List[np.ndarray] = []
        for axis, n in enumerate((nx, ny, nz)):
            c = coords[axis]
            if n == 1:
                i0 = np.zeros(c.shape, dtype=np.int64)
                frac = np.zeros(c.shape)
                inside = np.zeros(c.shape, dtype=bool)
            else:
                clamped = np.clip(c, 0.0, n - 1.0)
                i0 = np.minimum(np.floor(clamped).astype(np.int64), n - 2)
                frac = clamped - i0
                inside = (c >= 0.0) & (c <= n - 1.0)
            lower.append(i0)
            upper.append(np.minimum(i0 + 1, n - 1))
            fracs.append(frac)
            self.inside.append(inside)
        self.fracs = fracs

        self.corners = []
        for bx, by, bz in product((0, 1), repeat=3):
            x = upper[0] if bx else lower[0]
            y = upper[1] if by else lower[1]
            z = upper[2] if bz else lower[2]
            wx = fracs[0] if bx else 1.0 - fracs[0]
            wy = fracs[1] if by else 1.0 - fracs[1]
            wz = fracs[2] if bz else 1.0 - fracs[2]
            flat = ((z * ny + y) * nx + x).ravel()
            self.corners.append(((bx, by, bz), flat, (wx, wy, wz)))

    def sample(self, data: np.ndarray) -> np.ndarray:
        """Sample ``(C, z, y, x)`` data; returns ``(C, *out_shape)``."""
        channels = data.shape[0]
        flat_data = data.reshape(channels, -1)
        out = None
        for _, flat, (wx, wy, wz) in self.corners:
            term = flat_data[:, flat] * (wx * wy * wz).ravel()
            out = term if out is None else out + term
        return out.reshape((channels,) + self.out_shape)

    def scatter(self, grad: np.ndarray) -> np.ndarray:
        """Adjoint of :meth:`sample` with respect to the sampled data."""
        channels = grad.shape[0]
        grad = grad.reshape(channels, -1)
        indices = np.concatenate([flat for _, flat, _ in self.corners])
        weights = [(wx * wy * wz).ravel() for _, _, (wx, wy, wz) in self.corners]
        out = np.empty((channels, self.size), dtype=grad.dtype)
        for c in range(channels):
            contributions = np.concatenate([grad[c] * w for w in weights])
            out[c] = np.bincount(indices, weights=contributions, minlength=self.size)
        return out.reshape((channels,) + self.shape_zyx)

    def coordinate_gradient(self, data: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Gradient with respect to the ``(x, y, z)`` sample coordinates.

        Zero along an axis wherever the coordinate was clamped.
        """
        channels = data.shape[0]
        flat_data = data.reshape(channels, -1)
        grad = grad.reshape(channels, -1)
        out = np.zeros((3, grad.shape[1]), dtype=np.float64)
        for bits, flat, weights in self.corners:
            gv = (grad * flat_data[:, flat]).sum(axis=0)
            for axis in range(3):
                sign = 1.0 if bits[axis] else -1.0
                others = [weights[a] for a in range(3) if a != axis]
                out[axis] += sign * (others[0] * others[1]).ravel() * gv
        for axis in range(3):
            out[axis] *= self.inside[axis].ravel()
        return out.reshape((3,) + self.out_shape)


def identity_grid(shape_zyx: Tuple[int, int, int]) -> np.ndarray:
    """Voxel coordinates ``(3, z, y, x)`` of every voxel, ordered (x, y, z)."""
    nz, ny, nx = shape_zyx
    z, y, x = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    return np.stack([x, y, z])


def sample_trilinear(data: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return TrilinearSampler(data.shape[1:], coords).sample(data)
