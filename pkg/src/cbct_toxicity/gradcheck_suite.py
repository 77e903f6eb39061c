"""Gradient verification of every layer and composite loss at 8-voxel scale."""

import logging
from typing import Callable, List, Sequence, Tuple

import numpy as np
from pandas import DataFrame

from cbct_toxicity.common import Columns
from cbct_toxicity.nn import functional as F
from cbct_toxicity.nn.gradcheck import DEFAULT_TOLERANCE, gradcheck
from cbct_toxicity.nn.losses import weighted_softmax_cross_entropy
from cbct_toxicity.nn.tensor import Tensor
from cbct_toxicity.sim import dir_loss
from cbct_toxicity.toxnet.fusion import ClinicalBranchConfig, FusionConfig, FusionModel
from cbct_toxicity.toxnet.resnet import ResNetBranchConfig

logger = logging.getLogger(__name__)

Case = Tuple[str, Callable[..., Tensor], List[Tensor]]


def _tensor(array: np.ndarray) -> Tensor:
    return Tensor(np.asarray(array, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng: np.random.Generator, shape: Sequence[int]) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _projected(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    weights = rng.standard_normal(out.shape)
    return lambda t: (t * weights).sum()


def _layer_cases(rng: np.random.Generator) -> List[Case]:
    cases: List[Case] = []

    x = _tensor(rng.standard_normal((2, 2, 5, 5, 5)))
    w = _tensor(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
    b = _tensor(rng.standard_normal(3))
    project = _projected(F.conv3d(x, w, b, padding=1), rng)
    cases.append(("conv3d", lambda x, w, b: project(F.conv3d(x, w, b, padding=1)), [x, w, b]))

    x = _tensor(rng.standard_normal((1, 2, 6, 6, 6)))
    w = _tensor(rng.standard_normal((2, 2, 3, 3, 3)) * 0.3)
    project_s = _projected(F.conv3d(x, w, stride=2, padding=1), rng)
    cases.append(
        ("conv3d_stride2", lambda x, w: project_s(F.conv3d(x, w, stride=2, padding=1)), [x, w])
    )

    x = _tensor(rng.standard_normal((4, 5)))
    w = _tensor(rng.standard_normal((3, 5)))
    b = _tensor(rng.standard_normal(3))
    project_l = _projected(F.linear(x, w, b), rng)
    cases.append(("linear", lambda x, w, b: project_l(F.linear(x, w, b)), [x, w, b]))

    x = _tensor(_away_from_zero(rng, (2, 3, 4, 4, 4)))
    project_r = _projected(x, rng)
    cases.append(("relu", lambda x: project_r(F.relu(x)), [x]))
    cases.append(("leaky_relu", lambda x: project_r(F.leaky_relu(x)), [x]))

    x = _tensor(rng.standard_normal((3, 2, 4, 4, 4)))
    gamma = _tensor(rng.uniform(0.5, 1.5, 2))
    beta = _tensor(rng.standard_normal(2))
    project_bn = _projected(x, rng)

    def batch_norm(x, gamma, beta):
        stats = (np.zeros(2), np.ones(2))
        return project_bn(F.batch_norm(x, gamma, beta, stats[0], stats[1], training=True))

    cases.append(("batch_norm", batch_norm, [x, gamma, beta]))

    x = _tensor(rng.permutation(2 * 2 * 6 * 6 * 6).reshape(2, 2, 6, 6, 6) * 0.01)
    project_p = _projected(F.max_pool3d(x), rng)
    cases.append(("max_pool3d", lambda x: project_p(F.max_pool3d(x)), [x]))

    x = _tensor(rng.standard_normal((1, 2, 3, 3, 3)))
    project_u = _projected(F.upsample_nearest(x), rng)
    cases.append(("upsample_nearest", lambda x: project_u(F.upsample_nearest(x)), [x]))

    x = _tensor(rng.standard_normal((2, 3, 4, 4, 4)))
    project_g = _projected(F.global_avg_pool(x), rng)
    cases.append(("global_avg_pool", lambda x: project_g(F.global_avg_pool(x)), [x]))

    image = _tensor(rng.standard_normal((1, 2, 5, 5, 5)))
    coords = _tensor(rng.uniform(0.1, 3.9, (1, 3, 4, 4, 4)))
    project_st = _projected(F.spatial_transform(image, coords), rng)
    cases.append(
        (
            "spatial_transform",
            lambda image, coords: project_st(F.spatial_transform(image, coords)),
            [image, coords],
        )
    )

    x = _tensor(rng.standard_normal((4, 3)))
    project_sm = _projected(x, rng)
    cases.append(("log_softmax", lambda x: project_sm(F.log_softmax(x, axis=1)), [x]))
    return cases


def _composite_cases(rng: np.random.Generator) -> List[Case]:
    cases: List[Case] = []
    fixed = _tensor(rng.uniform(0.0, 1.0, (1, 1, 8, 8, 8)))
    moving = _tensor(rng.uniform(0.0, 1.0, (1, 1, 8, 8, 8)))
    dvf = _tensor(rng.uniform(-0.6, 0.6, (1, 3, 8, 8, 8)))
    spacing = (2.0, 2.0, 2.0)
    cases.append(
        (
            "dir_loss",
            lambda moving, dvf: dir_loss(fixed, moving, dvf, 0.5, spacing_mm=spacing),
            [moving, dvf],
        )
    )

    config = FusionConfig(
        jacobian=ResNetBranchConfig(34, in_channels=1, base_width=4),
        clinical=ClinicalBranchConfig(in_features=6, widths=(4, 4, 4), dropout=0.0),
    )
    model = FusionModel(config, np.random.default_rng(0))
    model.to(np.float64)
    model.eval()
    jacobian = _tensor(rng.standard_normal((2, 1, 8, 8, 8)))
    clinical = _tensor(rng.uniform(0.0, 1.0, (2, 6)))
    labels = np.array([0, 1])
    weights = np.array([0.7, 1.8])

    def fusion_loss(jacobian, clinical, decision):
        logits = model(jacobian=jacobian, clinical=clinical)
        return weighted_softmax_cross_entropy(logits, labels, weights)

    cases.append(
        ("fusion_cross_entropy", fusion_loss, [jacobian, clinical, model.decision.weight])
    )
    return cases


def run_suite(seed: int = 0, tolerance: float = DEFAULT_TOLERANCE) -> DataFrame:
    """One row per case: layer name, max relative error and whether it passed."""
    rng = np.random.default_rng(seed)
    rows = []
    for name, fn, inputs in _layer_cases(rng) + _composite_cases(rng):
        result = gradcheck(fn, inputs, tolerance=tolerance, seed=seed)
        logger.info(f"gradcheck {name}: max rel error {result.max_rel_error:.3e}")
        rows.append(
            {
                Columns.LAYER: name,
                Columns.MAX_REL_ERROR: result.max_rel_error,
                Columns.PASSED: result.passed,
            }
        )
    return DataFrame(rows)
