import logging
import time
from typing import Tuple

import numpy as np

from cbct_toxicity.field import RigidTransform, apply_rigid
from cbct_toxicity.nn import functional as F
from cbct_toxicity.nn.layers import Parameter
from cbct_toxicity.nn.optim import adam_step
from cbct_toxicity.nn.tensor import Tensor, stack
from cbct_toxicity.regnet.base import RegistrationError, RegistrationReport
from cbct_toxicity.regnet.pyramid import gaussian_pyramid
from cbct_toxicity.sim import ZeroVarianceError, ncc
from cbct_toxicity.volio import Volume

logger = logging.getLogger(__name__)

DEFAULT_LEVELS = 4
DEFAULT_ITERS = 100
ANGLE_STEP_RAD = 0.01
TRANSLATION_STEP_VOXELS = 0.25


def center_of_mass(vol: Volume) -> np.ndarray:
    weights = np.clip(vol.data[0].astype(np.float64), 0.0, None)
    total = weights.sum()
    if total <= 0:
        return vol.center_mm()
    grid = vol.physical_grid()
    return (grid * weights).reshape(3, -1).sum(axis=1) / total


def _rotation(angles: Tensor) -> Tensor:
    """``Rz Ry Rx`` built from graph ops so the angles receive gradients."""
    sa, sb, sg = angles[0].sin(), angles[1].sin(), angles[2].sin()
    ca, cb, cg = angles[0].cos(), angles[1].cos(), angles[2].cos()
    entries = [
        cg * cb,
        cg * sb * sa - sg * ca,
        cg * sb * ca + sg * sa,
        sg * cb,
        sg * sb * sa + cg * ca,
        sg * sb * ca - cg * sa,
        -sb,
        cb * sa,
        cb * ca,
    ]
    return stack(entries).reshape(3, 3)


def _pulled_back(
    fixed: Volume, moving: Volume, angles: Tensor, translation: Tensor, center: np.ndarray
) -> Tensor:
    """``moving`` sampled at ``T^-1(p)`` for every point ``p`` of the fixed grid."""
    points = fixed.physical_grid().reshape(3, -1)
    relative = (points - center[:, np.newaxis]) - translation.reshape(3, 1)
    source = _rotation(angles).transpose() @ relative + center[:, np.newaxis]
    voxel = (source - np.reshape(moving.origin_mm, (3, 1))) * (
        1.0 / np.reshape(moving.spacing_mm, (3, 1))
    )
    coords = voxel.reshape((1, 3) + fixed.shape_zyx)
    return F.spatial_transform(Tensor(moving.data.astype(np.float64)[np.newaxis]), coords)


def _safe_ncc(fixed: Volume, moving: Volume, transform: RigidTransform) -> float:
    try:
        return ncc(fixed, apply_rigid(moving, transform, reference=fixed))
    except ZeroVarianceError as e:
        raise RegistrationError(f"No overlapping content between images: {e}") from e


def rigid_register(
    fixed: Volume, moving: Volume, levels: int = DEFAULT_LEVELS, iters: int = DEFAULT_ITERS
) -> Tuple[RigidTransform, RegistrationReport]:
    """Six-parameter NCC registration, coarse to fine over a Gaussian pyramid.

    The returned transform maps moving-space points into fixed space, so
    ``apply_rigid(moving, t, reference=fixed)`` aligns ``moving`` to ``fixed``.
    """
    start = time.perf_counter()
    center = fixed.center_mm()
    identity = RigidTransform.identity(tuple(center))
    ncc_before = _safe_ncc(fixed, moving, identity)

    initial = center_of_mass(fixed) - center_of_mass(moving)
    angles = Parameter(np.zeros(3))
    translation = Parameter(initial)
    logger.info(f"Rigid registration from center-of-mass offset {np.round(initial, 2)} mm")

    fixed_levels = gaussian_pyramid(fixed, levels)
    moving_levels = gaussian_pyramid(moving, levels)
    loss_value = float("nan")
    total_iterations = 0
    for level in reversed(range(min(len(fixed_levels), len(moving_levels)))):
        fixed_l, moving_l = fixed_levels[level], moving_levels[level]
        fixed_t = Tensor(fixed_l.data.astype(np.float64)[np.newaxis])
        translation_step = TRANSLATION_STEP_VOXELS * min(fixed_l.spacing_mm)
        angles.reset_state()
        translation.reset_state()
        for it in range(iters):
            angles.grad = translation.grad = None
            warped = _pulled_back(fixed_l, moving_l, angles, translation, center)
            try:
                loss = -ncc(fixed_t, warped)
            except ZeroVarianceError as e:
                raise RegistrationError(f"NCC undefined at level {level}: {e}") from e
            loss_value = float(loss.data)
            loss.backward()
            decay = 1.0 - 0.9 * it / iters
            adam_step([angles], [angles.grad], ANGLE_STEP_RAD * decay)
            adam_step([translation], [translation.grad], translation_step * decay)
            total_iterations += 1
        logger.debug(f"Rigid level {level} {fixed_l.dims}: NCC {-loss_value:.5f}")

    transform = RigidTransform(tuple(angles.data), tuple(translation.data), tuple(center))
    ncc_after = _safe_ncc(fixed, moving, transform)
    if ncc_after < ncc_before:
        logger.info("Optimized transform scored below identity, keeping identity")
        transform, ncc_after = identity, ncc_before

    report = RegistrationReport(
        engine="rigid",
        final_loss=-ncc_after,
        ncc=ncc_after,
        iterations=total_iterations,
        wall_time_s=time.perf_counter() - start,
        extra={"ncc_before": ncc_before, "transform": transform.to_dict()},
    )
    logger.info(f"Rigid registration: NCC {ncc_before:.4f} -> {ncc_after:.4f}")
    return transform, report
