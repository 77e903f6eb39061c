"""Per-pair registration: Adam directly on a voxelwise displacement field,
coarse to fine, minimizing the same objective the UNet is trained on."""

import logging
import time
from typing import Optional, Tuple

import numpy as np

from cbct_toxicity.field import (
    DisplacementField,
    deformed_fraction,
    jacobian_field,
    warp,
)
from cbct_toxicity.nn.layers import Parameter
from cbct_toxicity.nn.optim import adam_step
from cbct_toxicity.nn.tensor import Tensor
from cbct_toxicity.regnet.base import (
    BaseRegistrator,
    DivergenceError,
    RegistrationReport,
    check_stage,
)
from cbct_toxicity.regnet.pyramid import gaussian_pyramid, upsample_field
from cbct_toxicity.sim import dir_loss, ncc
from cbct_toxicity.volio import MaskVolume, Volume, require_same_grid

logger = logging.getLogger(__name__)

DEFAULT_ITERS = 150
DEFAULT_LEVELS = 3
DEFAULT_LR_MM = 0.25


def _as_batch(vol: Volume) -> Tensor:
    return Tensor(vol.data.astype(np.float64)[np.newaxis])


def direct_field_register(
    fixed: Volume,
    moving: Volume,
    lam: float,
    iters: int = DEFAULT_ITERS,
    levels: int = DEFAULT_LEVELS,
    lr_mm: float = DEFAULT_LR_MM,
    mask: Optional[MaskVolume] = None,
) -> Tuple[DisplacementField, RegistrationReport]:
    require_same_grid(fixed, moving, "fixed and moving images")
    if iters < 1:
        raise ValueError(f"iters must be positive, got {iters}")
    start = time.perf_counter()
    fixed_levels = gaussian_pyramid(fixed, levels)
    moving_levels = gaussian_pyramid(moving, levels)

    field_data: Optional[np.ndarray] = None
    loss_value = float("nan")
    total_iterations = 0
    for level in reversed(range(len(fixed_levels))):
        fixed_l, moving_l = fixed_levels[level], moving_levels[level]
        if field_data is None:
            field_data = np.zeros((3,) + fixed_l.shape_zyx)
        else:
            field_data = upsample_field(field_data, fixed_l.shape_zyx)
        # the mask only applies at full resolution
        level_mask = mask if level == 0 else None
        fixed_t, moving_t = _as_batch(fixed_l), _as_batch(moving_l)
        param = Parameter(field_data[np.newaxis])
        step_mm = lr_mm * (2**level)
        last_finite = field_data.copy()

        for it in range(iters):
            param.grad = None
            loss = dir_loss(
                fixed_t, moving_t, param, lam, mask=level_mask, spacing_mm=fixed_l.spacing_mm
            )
            loss_value = float(loss.data)
            if not np.isfinite(loss_value):
                last = DisplacementField(last_finite, fixed_l.spacing_mm, fixed_l.origin_mm)
                raise DivergenceError(
                    f"Non-finite loss at level {level}, iteration {it}", last, total_iterations
                )
            last_finite = param.data[0].copy()
            loss.backward()
            # step decays linearly to a tenth over the level
            adam_step([param], [param.grad], step_mm * (1.0 - 0.9 * it / iters))
            total_iterations += 1
        field_data = param.data[0]
        logger.debug(f"Level {level} {fixed_l.dims}: loss {loss_value:.5f}")

    result = DisplacementField(field_data.astype(np.float32), fixed.spacing_mm, fixed.origin_mm)
    final_loss = dir_loss(fixed, moving, result, lam, mask=mask)
    fraction = deformed_fraction(jacobian_field(result)) if min(result.dims) >= 3 else None
    report = RegistrationReport(
        engine="direct",
        lam=lam,
        final_loss=final_loss,
        ncc=ncc(fixed, warp(moving, result), mask),
        deformed_fraction=fraction,
        iterations=total_iterations,
        wall_time_s=time.perf_counter() - start,
    )
    logger.info(
        f"Direct registration: loss {report.final_loss:.4f}, NCC {report.ncc:.4f} "
        f"after {total_iterations} iterations"
    )
    return result, report


class DirectFieldRegistrator(BaseRegistrator):
    """Registrator that optimizes every pair from scratch."""

    def __init__(
        self,
        stage: str,
        lam: float,
        iters: int = DEFAULT_ITERS,
        levels: int = DEFAULT_LEVELS,
        lr_mm: float = DEFAULT_LR_MM,
    ):
        check_stage(stage)
        self._stage = stage
        self.lam = lam
        self.iters = iters
        self.levels = levels
        self.lr_mm = lr_mm
        self.last_report: Optional[RegistrationReport] = None

    def predict(self, fixed: Volume, moving: Volume) -> DisplacementField:
        dvf, report = direct_field_register(
            fixed, moving, self.lam, self.iters, self.levels, self.lr_mm
        )
        report.stage = self._stage
        self.last_report = report
        return dvf
