import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pandas import DataFrame

from cbct_toxicity.cohort.records import Landmark
from cbct_toxicity.common import Columns
from cbct_toxicity.field import DisplacementField
from cbct_toxicity.interpolation import sample_trilinear
from cbct_toxicity.volio import Volume

logger = logging.getLogger(__name__)

CORRELATION_R2 = 0.9


class SingleClassError(ValueError):
    pass


class LandmarkOutsideGridError(ValueError):
    pass


class DegenerateFitError(ValueError):
    pass


class StratificationError(ValueError):
    pass


@dataclass(frozen=True)
class FoldMetrics:
    sensitivity: float
    specificity: float
    bacc: float
    tp: int
    fn: int
    tn: int
    fp: int


@dataclass
class MetricsReport:
    """Fold-wise metrics with their mean and population standard deviation."""

    folds: List[FoldMetrics] = field(default_factory=list)

    def _values(self, name: str) -> np.ndarray:
        return np.array([getattr(f, name) for f in self.folds], dtype=np.float64)

    def mean(self, name: str) -> float:
        return float(self._values(name).mean())

    def std(self, name: str) -> float:
        return float(self._values(name).std(ddof=0))

    @property
    def bacc(self) -> float:
        return self.mean("bacc")

    def summary(self) -> Dict[str, float]:
        return {
            Columns.BACC_MEAN: self.mean("bacc"),
            Columns.BACC_STD: self.std("bacc"),
            Columns.SENS_MEAN: self.mean("sensitivity"),
            Columns.SENS_STD: self.std("sensitivity"),
            Columns.SPEC_MEAN: self.mean("specificity"),
            Columns.SPEC_STD: self.std("specificity"),
        }

    def to_frame(self) -> DataFrame:
        return DataFrame(
            [
                {
                    Columns.FOLD: index,
                    Columns.BACC: f.bacc,
                    Columns.SENSITIVITY: f.sensitivity,
                    Columns.SPECIFICITY: f.specificity,
                    "tp": f.tp,
                    "fn": f.fn,
                    "tn": f.tn,
                    "fp": f.fp,
                }
                for index, f in enumerate(self.folds)
            ]
        )


def _binary(values: Sequence, name: str) -> np.ndarray:
    array = np.asarray(values).astype(np.int64).ravel()
    if not np.all(np.isin(array, (0, 1))):
        raise ValueError(f"{name} must be binary")
    return array


def confusion_metrics(predictions: Sequence, labels: Sequence) -> MetricsReport:
    predicted = _binary(predictions, "predictions")
    truth = _binary(labels, "labels")
    if predicted.shape != truth.shape:
        raise ValueError(f"Got {predicted.size} predictions for {truth.size} labels")
    positives = int(truth.sum())
    if positives == 0 or positives == truth.size:
        raise SingleClassError("Labels contain a single class")
    tp = int(np.sum((predicted == 1) & (truth == 1)))
    fn = int(np.sum((predicted == 0) & (truth == 1)))
    tn = int(np.sum((predicted == 0) & (truth == 0)))
    fp = int(np.sum((predicted == 1) & (truth == 0)))
    sensitivity = tp / (tp + fn)
    specificity = tn / (tn + fp)
    return MetricsReport(
        [FoldMetrics(sensitivity, specificity, (sensitivity + specificity) / 2, tp, fn, tn, fp)]
    )


def aggregate_folds(reports: Sequence[MetricsReport]) -> MetricsReport:
    return MetricsReport([fold for report in reports for fold in report.folds])


def kfold_split(
    ids: Sequence[Hashable],
    k: int = 5,
    seed: int = 0,
    stratify_labels: Optional[Sequence] = None,
) -> List[List[Hashable]]:
    """Partition ``ids`` into ``k`` folds, dealing each class round-robin.

    Positives are dealt first; negatives continue from the fold after the last
    positive, so fold sizes and per-fold positive counts each differ by at most 1.
    """
    n = len(ids)
    if k < 2:
        raise ValueError(f"k must be at least 2, got {k}")
    if len(set(ids)) != n:
        raise ValueError("ids must be unique")
    if n < k:
        raise ValueError(f"Cannot split {n} ids into {k} folds")
    rng = np.random.default_rng(seed)

    if stratify_labels is None:
        groups = [np.arange(n)]
    else:
        labels = _binary(stratify_labels, "stratify_labels")
        if labels.size != n:
            raise ValueError(f"Got {labels.size} labels for {n} ids")
        groups = [np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)]
        for cls, members in zip((1, 0), groups):
            if members.size < k:
                raise StratificationError(
                    f"Class {cls} has {members.size} members, fewer than {k} folds"
                )

    assignment: List[List[int]] = [[] for _ in range(k)]
    cursor = 0
    for members in groups:
        for index in rng.permutation(members):
            assignment[cursor % k].append(int(index))
            cursor += 1
    return [[ids[i] for i in sorted(fold)] for fold in assignment]


def fold_hash(folds: Sequence[Sequence[Hashable]]) -> str:
    payload = json.dumps([[str(i) for i in fold] for fold in folds], separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def tre(landmarks: Sequence[Landmark], dvf: Volume) -> Tuple[float, float]:
    """Mean and standard deviation (mm) of ``|x_f + u(x_f) - x_m|``."""
    if not landmarks:
        raise ValueError("TRE needs at least one landmark pair")
    field_ = DisplacementField.from_volume(dvf)
    fixed = np.array([lm.fixed_mm for lm in landmarks], dtype=np.float64).T
    moving = np.array([lm.moving_mm for lm in landmarks], dtype=np.float64).T
    voxel = field_.physical_to_voxel(fixed)
    upper = np.array(field_.dims, dtype=np.float64).reshape(3, 1) - 1.0
    outside = np.any((voxel < -1e-9) | (voxel > upper + 1e-9), axis=0)
    if np.any(outside):
        ids = [lm.id for lm, out in zip(landmarks, outside) if out]
        raise LandmarkOutsideGridError(f"Landmarks {ids} lie outside the displacement grid")
    displacement = sample_trilinear(field_.data.astype(np.float64), voxel)
    errors = np.linalg.norm(fixed + displacement - moving, axis=0)
    return float(errors.mean()), float(errors.std(ddof=0))


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> Tuple[float, float, float]:
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1D sequences of equal length")
    if x.size < 3:
        raise DegenerateFitError(f"A linear fit needs at least 3 points, got {x.size}")
    dx = x - x.mean()
    sxx = float(np.dot(dx, dx))
    if sxx == 0.0:
        raise DegenerateFitError("xs are all equal")
    dy = y - y.mean()
    slope = float(np.dot(dx, dy)) / sxx
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(np.dot(dy, dy))
    if ss_tot == 0.0:
        return slope, intercept, 0.0
    residual = y - (slope * x + intercept)
    r2 = 1.0 - float(np.dot(residual, residual)) / ss_tot
    return slope, intercept, min(max(r2, 0.0), 1.0)


@dataclass
class EvolutionTable:
    """bAcc per fraction; the line is fitted over fractions > 0."""

    target: str
    fractions: List[int]
    bacc_mean: List[float]
    bacc_std: List[float]
    slope: float = float("nan")
    intercept: float = float("nan")
    r2: float = float("nan")
    fold_hash: str = ""

    @property
    def correlated(self) -> bool:
        return bool(self.r2 >= CORRELATION_R2)

    def to_frame(self) -> DataFrame:
        return pd.DataFrame(
            {
                Columns.FRACTION: self.fractions,
                Columns.BACC_MEAN: self.bacc_mean,
                Columns.BACC_STD: self.bacc_std,
            }
        )

    def fit_summary(self) -> Dict[str, Any]:
        return {
            "target": self.target,
            "slope": self.slope,
            "intercept": self.intercept,
            "r2": self.r2,
            "correlated": self.correlated,
            "threshold_r2": CORRELATION_R2,
            "fold_hash": self.fold_hash,
        }
