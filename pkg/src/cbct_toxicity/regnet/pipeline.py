import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

from cbct_toxicity.common import ANATOMY_STAGE, MODALITY_STAGE
from cbct_toxicity.field import (
    DisplacementField,
    JacobianField,
    RigidTransform,
    apply_rigid,
    compose,
    jacobian_field,
    jacobian_summary,
    warp,
)
from cbct_toxicity.regnet.base import BaseRegistrator, require_stage
from cbct_toxicity.volio import Volume

logger = logging.getLogger(__name__)


@dataclass
class TwoStageResult:
    aligned_ct: Volume
    composed: DisplacementField
    jacobian: JacobianField
    u_modality: DisplacementField
    u_anatomy: DisplacementField
    summary: Dict[str, float] = field(default_factory=dict)


def two_stage_apply(
    model_a: BaseRegistrator,
    model_b: BaseRegistrator,
    pct: Volume,
    cbct_t: Volume,
    rigid: RigidTransform,
    cbct_0: Optional[Volume] = None,
    compose_reversed: bool = False,
) -> TwoStageResult:
    """Rigid, then modality, then anatomy registration; returns the composed field.

    Without ``cbct_0`` the modality stage registers against ``cbct_t``, since at
    test time the aligned CT stands in for the first-fraction CBCT.
    """
    require_stage(model_a, MODALITY_STAGE)
    require_stage(model_b, ANATOMY_STAGE)

    rigid_ct = apply_rigid(pct, rigid, reference=cbct_t)
    modality_fixed = cbct_0 if cbct_0 is not None else cbct_t
    u_a = model_a.predict(modality_fixed, rigid_ct)
    aligned_ct = warp(rigid_ct, u_a)
    u_b = model_b.predict(cbct_t, aligned_ct)
    composed = compose(u_b, u_a) if compose_reversed else compose(u_a, u_b)
    jf = jacobian_field(composed)
    summary = jacobian_summary(jf)
    logger.info(f"Two-stage registration: deformed fraction {summary['deformed_fraction']:.4f}")
    return TwoStageResult(aligned_ct, composed, jf, u_a, u_b, summary)
