"""Similarity and regularization terms of the registration objective.

Every function takes either :class:`Volume` arguments, returning a float, or
``(N, C, D, H, W)`` graph tensors, returning a differentiable scalar tensor
averaged over the batch.
"""

from typing import Optional, Sequence, Union

import numpy as np

from cbct_toxicity.nn import functional as F
from cbct_toxicity.nn.tensor import Tensor, no_grad
from cbct_toxicity.volio import Volume, require_same_grid

VolumeOrTensor = Union[Volume, Tensor]


class ZeroVarianceError(ValueError):
    pass


def _batched(value: VolumeOrTensor) -> Tensor:
    if isinstance(value, Tensor):
        if value.ndim != 5:
            raise ValueError(f"Expected a (N, C, D, H, W) tensor, got {value.shape}")
        return value
    return Tensor(value.data.astype(np.float64)[np.newaxis])


def _mask_weights(mask, like: Tensor) -> Optional[np.ndarray]:
    if mask is None:
        return None
    weights = mask.data if isinstance(mask, (Volume, Tensor)) else np.asarray(mask)
    if weights.ndim == 4:
        weights = weights[np.newaxis]
    weights = np.broadcast_to(weights.astype(like.dtype), like.shape)
    return weights.reshape(like.shape[0], -1)


def _ncc(a: Tensor, b: Tensor, mask=None) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"Cannot correlate {a.shape} with {b.shape}")
    n = a.shape[0]
    flat_a, flat_b = a.reshape(n, -1), b.reshape(n, -1)
    weights = _mask_weights(mask, a)
    if weights is None:
        count = np.full((n, 1), flat_a.shape[1], dtype=a.dtype)
    else:
        count = weights.sum(axis=1, keepdims=True)
        flat_a, flat_b = flat_a * weights, flat_b * weights
    if np.any(count < 2):
        raise ValueError("NCC needs at least 2 voxels inside the mask")

    da = flat_a - flat_a.sum(axis=1, keepdims=True) / count
    db = flat_b - flat_b.sum(axis=1, keepdims=True) / count
    if weights is not None:
        da, db = da * weights, db * weights
    var_a = (da * da).sum(axis=1)
    var_b = (db * db).sum(axis=1)
    if np.any(var_a.data <= 0) or np.any(var_b.data <= 0):
        raise ZeroVarianceError("NCC is undefined for an input with zero variance")
    correlation = (da * db).sum(axis=1) / (var_a * var_b).sqrt()
    return correlation.mean()


def ncc(a: VolumeOrTensor, b: VolumeOrTensor, mask=None):
    """Pearson correlation of (in-mask) voxel values, in [-1, 1]."""
    if isinstance(a, Volume) and isinstance(b, Volume):
        require_same_grid(a, b)
        with no_grad():
            return float(_ncc(_batched(a), _batched(b), mask).data)
    return _ncc(_batched(a), _batched(b), mask)


def _penalty(u: Tensor) -> Tensor:
    if min(u.shape[2:]) < 2:
        raise ValueError(f"Gradient penalty needs at least 2 voxels per axis, got {u.shape[2:]}")
    total = None
    for axis in F.SPATIAL_AXES:
        ahead = [slice(None)] * 5
        behind = [slice(None)] * 5
        ahead[axis] = slice(1, None)
        behind[axis] = slice(None, -1)
        diff = u[tuple(ahead)] - u[tuple(behind)]
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total


def l2_gradient_penalty(dvf: VolumeOrTensor):
    """Sum over axes of the mean squared forward difference between neighbours."""
    if isinstance(dvf, Volume):
        with no_grad():
            return float(_penalty(_batched(dvf)).data)
    return _penalty(_batched(dvf))


def _dir_loss(
    fixed: Tensor,
    moving: Tensor,
    dvf: Tensor,
    lam: float,
    spacing_mm: Sequence[float],
    mask=None,
) -> Tensor:
    warped = F.warp_displacement(moving, dvf, spacing_mm)
    loss = -_ncc(fixed, warped, mask)
    if lam:
        loss = loss + _penalty(dvf) * lam
    return loss


def dir_loss(
    fixed: VolumeOrTensor,
    moving: VolumeOrTensor,
    dvf: VolumeOrTensor,
    lam: float,
    mask=None,
    spacing_mm: Optional[Sequence[float]] = None,
):
    """``-ncc(fixed, warp(moving, dvf)) + lam * l2_gradient_penalty(dvf)``.

    Tensor inputs need ``spacing_mm`` to convert the field to voxel units.
    """
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    if isinstance(dvf, Volume):
        require_same_grid(fixed, dvf, "fixed image and displacement field")
        require_same_grid(moving, dvf, "moving image and displacement field")
        with no_grad():
            loss = _dir_loss(
                _batched(fixed), _batched(moving), _batched(dvf), lam, dvf.spacing_mm, mask
            )
        return float(loss.data)
    if spacing_mm is None:
        raise ValueError("spacing_mm is required for tensor inputs")
    return _dir_loss(_batched(fixed), _batched(moving), _batched(dvf), lam, spacing_mm, mask)
