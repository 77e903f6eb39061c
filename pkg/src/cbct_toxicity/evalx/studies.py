import asyncio
import logging
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from cbct_toxicity.cohort.phantom import PhantomCase
from cbct_toxicity.cohort.records import encode_clinical
from cbct_toxicity.cohort.synthetic import SyntheticCohort
from cbct_toxicity.common import (
    ANATOMY_STAGE,
    CBCT_BRANCH,
    CLINICAL_BRANCH,
    JACOBIAN_BRANCH,
    JACOBIAN_DETERMINANT,
    MODALITY_STAGE,
    combination_name,
)
from cbct_toxicity.config import RunConfig
from cbct_toxicity.evalx.metrics import (
    EvolutionTable,
    MetricsReport,
    aggregate_folds,
    confusion_metrics,
    fold_hash,
    kfold_split,
    linear_fit_r2,
    tre,
)
from cbct_toxicity.field import (
    DisplacementField,
    RigidTransform,
    apply_rigid,
    jacobian_determinant,
    jacobian_field,
    through_rigid,
    warp,
)
from cbct_toxicity.regnet.base import BaseRegistrator
from cbct_toxicity.regnet.pipeline import TwoStageResult, two_stage_apply
from cbct_toxicity.regnet.rigid import rigid_register
from cbct_toxicity.sim import ncc
from cbct_toxicity.toxnet.fusion import ClinicalBranchConfig, FusionConfig
from cbct_toxicity.toxnet.resnet import ResNetBranchConfig
from cbct_toxicity.toxnet.training import (
    ToxicityDataset,
    TrainingHistory,
    predict_labels,
    train_classifier,
)

logger = logging.getLogger(__name__)

VALIDATION_SHARE = 0.15

FoldTrainer = Callable[
    [ToxicityDataset, Optional[ToxicityDataset], ToxicityDataset, FusionConfig, int],
    Tuple[np.ndarray, TrainingHistory],
]


@dataclass
class CrossValidation:
    combination: str
    report: MetricsReport
    folds: List[List[str]]
    fold_hash: str
    histories: List[TrainingHistory] = field(default_factory=list)
    fraction: int = 0


@dataclass
class AblationResult:
    rows: List[CrossValidation]
    fraction: int
    target: str


@dataclass
class EvolutionResult:
    table: EvolutionTable
    rows: List[CrossValidation]


def fusion_config(
    branches: Sequence[str], config: RunConfig, jacobian_channels: int
) -> FusionConfig:
    def image(channels: int) -> ResNetBranchConfig:
        return ResNetBranchConfig(config.resnet_variant, channels, config.resnet_width)

    return FusionConfig(
        cbct=image(1) if CBCT_BRANCH in branches else None,
        jacobian=image(jacobian_channels) if JACOBIAN_BRANCH in branches else None,
        clinical=ClinicalBranchConfig() if CLINICAL_BRANCH in branches else None,
    )


def register_patient(
    registrators: Dict[str, BaseRegistrator],
    pct,
    cbct_0,
    cbct_t,
    config: RunConfig,
) -> TwoStageResult:
    """Rigid alignment of the pCT onto ``cbct_t`` followed by both DIR stages."""
    rigid, _ = rigid_register(cbct_t, pct, levels=config.rigid_levels, iters=config.rigid_iters)
    return two_stage_apply(
        registrators[MODALITY_STAGE],
        registrators[ANATOMY_STAGE],
        pct,
        cbct_t,
        rigid,
        cbct_0=cbct_0,
        compose_reversed=config.compose_reversed,
    )


def _jacobian_input(dvf: DisplacementField, mode: str) -> np.ndarray:
    jf = jacobian_field(dvf)
    if mode == JACOBIAN_DETERMINANT:
        return jacobian_determinant(jf).data.astype(np.float32)
    return jf.data.astype(np.float32)


def assemble_dataset(
    cohort: SyntheticCohort,
    fraction: int,
    config: RunConfig,
    branches: Sequence[str],
    registrators: Optional[Dict[str, BaseRegistrator]] = None,
) -> ToxicityDataset:
    """Stack the inputs of ``branches`` at ``fraction`` for every patient of ``cohort``."""
    if fraction not in cohort.fractions:
        raise ValueError(f"Cohort has no CBCT at fraction {fraction}, got {cohort.fractions}")
    patients = cohort.patients
    clinical = cbct = jacobian = None
    if CLINICAL_BRANCH in branches:
        clinical = np.stack([encode_clinical(p.record).values for p in patients]).astype(np.float32)
    if CBCT_BRANCH in branches:
        cbct = np.stack([p.cbct[fraction].data for p in patients]).astype(np.float32)
    if JACOBIAN_BRANCH in branches:
        fields = []
        for p in patients:
            if config.jacobian_source == "registered":
                if registrators is None:
                    raise ValueError("Registered Jacobians need registrators")
                result = register_patient(registrators, p.pct, p.cbct[0], p.cbct[fraction], config)
                fields.append(result.composed)
            else:
                fields.append(p.dvf[fraction])
        jacobian = np.stack([_jacobian_input(f, config.jacobian_mode) for f in fields])
    masks = None
    if config.mask and (cbct is not None or jacobian is not None):
        masks = np.broadcast_to(cohort.mask.data, (len(patients),) + cohort.mask.data.shape).copy()
    return ToxicityDataset(
        [p.record.id for p in patients],
        cohort.labels(config.target),
        clinical,
        cbct,
        jacobian,
        masks,
    )


def validation_split(
    labels: np.ndarray, rng: np.random.Generator, share: float = VALIDATION_SHARE
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Stratified carve-out of ``share`` of a training fold for checkpoint selection.

    Returns no validation set when a class has fewer than 2 members.
    """
    train, val = [], []
    for cls in (1, 0):
        members = rng.permutation(np.flatnonzero(labels == cls))
        if members.size < 2:
            return np.arange(labels.size), None
        count = max(1, int(math.floor(share * members.size + 0.5)))
        val.extend(members[:count])
        train.extend(members[count:])
    return np.sort(np.array(train)), np.sort(np.array(val))


def fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1)[0])


def make_fold_trainer(config: RunConfig) -> FoldTrainer:
    def train_and_predict(train, val, test, fusion, seed):
        model, history = train_classifier(
            train,
            val,
            fusion,
            epochs=config.tox_epochs,
            batch=config.tox_batch,
            lr=config.tox_lr,
            seed=seed,
        )
        return predict_labels(model, test, config.tox_batch), history

    return train_and_predict


async def cross_validate(
    dataset: ToxicityDataset,
    fusion: FusionConfig,
    folds: List[List[str]],
    config: RunConfig,
    trainer: Optional[FoldTrainer] = None,
    limiter: Optional[asyncio.Semaphore] = None,
) -> CrossValidation:
    trainer = trainer or make_fold_trainer(config)
    limiter = limiter or asyncio.Semaphore(config.threads)
    position = {patient_id: index for index, patient_id in enumerate(dataset.ids)}
    name = combination_name(fusion.branches)

    async def run_fold(index: int, test_ids: List[str]):
        test_idx = np.array([position[i] for i in test_ids])
        pool = np.setdiff1d(np.arange(len(dataset)), test_idx)
        seed = fold_seed(config.seed, index)
        train_rel, val_rel = validation_split(dataset.labels[pool], np.random.default_rng(seed))
        train = dataset.subset(pool[train_rel])
        val = None if val_rel is None else dataset.subset(pool[val_rel])
        test = dataset.subset(test_idx)
        async with limiter:
            logger.debug(f"{name}: fold {index} on {len(train)} patients")
            predictions, history = await asyncio.to_thread(trainer, train, val, test, fusion, seed)
        return confusion_metrics(predictions, test.labels), history

    outcomes = await asyncio.gather(*[run_fold(i, ids) for i, ids in enumerate(folds)])
    report = aggregate_folds([metrics for metrics, _ in outcomes])
    logger.info(f"{name}: bAcc {report.mean('bacc'):.3f} +/- {report.std('bacc'):.3f}")
    return CrossValidation(
        name, report, folds, fold_hash(folds), [history for _, history in outcomes]
    )


def study_folds(cohort: SyntheticCohort, config: RunConfig) -> List[List[str]]:
    ids = [p.record.id for p in cohort.patients]
    folds = kfold_split(ids, config.folds, config.seed, cohort.labels(config.target))
    logger.info(f"Fold assignment hash {fold_hash(folds)}")
    return folds


async def ablation_study(
    cohort: SyntheticCohort,
    combinations: Sequence[Sequence[str]],
    fraction: int,
    config: RunConfig,
    trainer: Optional[FoldTrainer] = None,
    registrators: Optional[Dict[str, BaseRegistrator]] = None,
) -> AblationResult:
    """Cross-validate each branch combination on the same folds."""
    needed = sorted({branch for combination in combinations for branch in combination})
    dataset = assemble_dataset(cohort, fraction, config, needed, registrators)
    channels = 0 if dataset.jacobian is None else dataset.jacobian.shape[1]
    folds = study_folds(cohort, config)
    limiter = asyncio.Semaphore(config.threads)
    rows = await asyncio.gather(
        *[
            cross_validate(
                dataset, fusion_config(c, config, channels), folds, config, trainer, limiter
            )
            for c in combinations
        ]
    )
    for row in rows:
        row.fraction = fraction
    return AblationResult(list(rows), fraction, config.target)


async def risk_evolution(
    cohort: SyntheticCohort,
    fractions: Sequence[int],
    config: RunConfig,
    trainer: Optional[FoldTrainer] = None,
    registrators: Optional[Dict[str, BaseRegistrator]] = None,
) -> EvolutionResult:
    """bAcc of the configured branches per fraction; fraction 0 is the clinical-only model."""
    folds = study_folds(cohort, config)
    limiter = asyncio.Semaphore(config.threads)

    async def evaluate(t: int) -> CrossValidation:
        branches = (CLINICAL_BRANCH,) if t == 0 else tuple(config.branches)
        async with limiter:
            dataset = await asyncio.to_thread(
                assemble_dataset, cohort, t, config, branches, registrators
            )
        channels = 0 if dataset.jacobian is None else dataset.jacobian.shape[1]
        row = await cross_validate(
            dataset, fusion_config(branches, config, channels), folds, config, trainer, limiter
        )
        row.fraction = t
        return row

    series = sorted({0, *(int(t) for t in fractions)})
    rows = list(await asyncio.gather(*[evaluate(t) for t in series]))
    table = EvolutionTable(
        target=config.target,
        fractions=series,
        bacc_mean=[row.report.mean("bacc") for row in rows],
        bacc_std=[row.report.std("bacc") for row in rows],
        fold_hash=fold_hash(folds),
    )
    fitted = [(t, b) for t, b in zip(table.fractions, table.bacc_mean) if t > 0]
    if len(fitted) >= 3:
        xs, ys = zip(*fitted)
        table.slope, table.intercept, table.r2 = linear_fit_r2(xs, ys)
        verdict = "correlated" if table.correlated else "no correlation"
        logger.info(
            f"{config.target}: slope {table.slope:.4f}/fraction, r2 {table.r2:.3f} ({verdict})"
        )
    else:
        logger.info("Fewer than 3 fractions after 0, skipping the linear fit")
    return EvolutionResult(table, rows)


def registration_study(
    case: PhantomCase,
    registrators: Dict[str, BaseRegistrator],
    fraction: int,
    config: RunConfig,
) -> Tuple[TwoStageResult, Dict[str, Any]]:
    """TRE and NCC before and after the rigid plus two-stage registration of one fraction.

    Errors are measured on the full CBCT to pCT mapping, rigid step included.
    """
    cbct_t = case.cbct[fraction]
    landmarks = case.landmarks[fraction]
    rigid, _ = rigid_register(cbct_t, case.pct, config.rigid_levels, config.rigid_iters)
    result = two_stage_apply(
        registrators[MODALITY_STAGE],
        registrators[ANATOMY_STAGE],
        case.pct,
        cbct_t,
        rigid,
        cbct_0=case.cbct.get(0),
        compose_reversed=config.compose_reversed,
    )
    mapping = through_rigid(result.composed, rigid)
    tre_before, tre_before_std = tre(landmarks, DisplacementField.zeros(cbct_t))
    tre_after, tre_after_std = tre(landmarks, mapping)
    unaligned = apply_rigid(case.pct, RigidTransform.identity(), reference=cbct_t)
    metrics = {
        "fraction": fraction,
        "tre_before_mm": tre_before,
        "tre_before_std_mm": tre_before_std,
        "tre_after_mm": tre_after,
        "tre_after_std_mm": tre_after_std,
        "ncc_before": ncc(cbct_t, unaligned),
        "ncc_rigid": ncc(cbct_t, apply_rigid(case.pct, rigid, reference=cbct_t)),
        "ncc_after": ncc(cbct_t, warp(result.aligned_ct, result.u_anatomy)),
        "max_field_error_mm": float(np.abs(mapping.data - case.dvf[fraction].data).max()),
        "rigid": rigid.to_dict(),
        **result.summary,
    }
    logger.info(
        f"Fraction {fraction}: TRE {tre_before:.2f} -> {tre_after:.2f} mm, NCC "
        f"{metrics['ncc_before']:.4f} -> {metrics['ncc_rigid']:.4f} (rigid) "
        f"-> {metrics['ncc_after']:.4f}"
    )
    return result, metrics
