import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pandas import DataFrame

from cbct_toxicity.common import Columns
from cbct_toxicity.evalx.metrics import SingleClassError, confusion_metrics
from cbct_toxicity.nn import functional as F
from cbct_toxicity.nn.losses import weighted_softmax_cross_entropy
from cbct_toxicity.nn.optim import Adam, TrainSchedule, onecycle_lr
from cbct_toxicity.nn.tensor import no_grad
from cbct_toxicity.toxnet.fusion import FusionConfig, FusionModel, build_model, forward_batch

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = 100
DEFAULT_BATCH = 8
DEFAULT_LR = 7e-4


def class_weights(labels: Sequence[int]) -> np.ndarray:
    """Inverse-frequency weights scaled so the expected per-sample weight is 1."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.array([np.sum(labels == 0), np.sum(labels == 1)], dtype=np.float64)
    if counts.sum() != labels.size:
        raise ValueError("Labels must be binary")
    if np.any(counts == 0):
        raise SingleClassError(f"Class weights need both classes, got counts {counts.tolist()}")
    frequencies = counts / labels.size
    return 1.0 / (2.0 * frequencies)


@dataclass
class ToxicityDataset:
    """Stacked model inputs; images are ``(N, C, D, H, W)``."""

    ids: List[str]
    labels: np.ndarray
    clinical: Optional[np.ndarray] = None
    cbct: Optional[np.ndarray] = None
    jacobian: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.ids)
        if self.labels.shape != (n,):
            raise ValueError(f"Got {self.labels.shape[0]} labels for {n} patients")
        for name in ("clinical", "cbct", "jacobian", "masks"):
            value = getattr(self, name)
            if value is not None and value.shape[0] != n:
                raise ValueError(f"`{name}` holds {value.shape[0]} rows for {n} patients")

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, indices: Sequence[int]) -> "ToxicityDataset":
        indices = np.asarray(indices, dtype=np.int64)

        def take(array: Optional[np.ndarray]) -> Optional[np.ndarray]:
            return None if array is None else array[indices]

        return ToxicityDataset(
            [self.ids[i] for i in indices],
            self.labels[indices],
            take(self.clinical),
            take(self.cbct),
            take(self.jacobian),
            take(self.masks),
        )

    def logits(self, model: FusionModel, indices: Sequence[int]):
        batch = self.subset(indices)
        return forward_batch(model, batch.cbct, batch.jacobian, batch.clinical, batch.masks)


@dataclass
class TrainingHistory:
    rows: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0

    def to_frame(self) -> DataFrame:
        columns = [
            Columns.EPOCH,
            Columns.LOSS,
            Columns.LR,
            Columns.VAL_BACC,
            Columns.VAL_SENS,
            Columns.VAL_SPEC,
        ]
        return DataFrame(self.rows, columns=columns)


def _batches(order: np.ndarray, batch: int) -> List[np.ndarray]:
    """Split ``order`` into batches; a trailing single sample joins the previous batch."""
    batches = [order[i : i + batch] for i in range(0, len(order), batch)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches.pop()])
    return batches


def predict_proba(model: FusionModel, dataset: ToxicityDataset, batch: int = DEFAULT_BATCH):
    model.eval()
    probabilities = []
    with no_grad():
        for first in range(0, len(dataset), batch):
            indices = np.arange(first, min(first + batch, len(dataset)))
            probabilities.append(F.softmax(dataset.logits(model, indices), axis=1).data)
    return np.concatenate(probabilities, axis=0)


def predict_labels(
    model: FusionModel, dataset: ToxicityDataset, batch: int = DEFAULT_BATCH
) -> np.ndarray:
    return np.argmax(predict_proba(model, dataset, batch), axis=1).astype(np.int64)


def train_classifier(
    train: ToxicityDataset,
    val: Optional[ToxicityDataset],
    config: FusionConfig,
    epochs: int = DEFAULT_EPOCHS,
    batch: int = DEFAULT_BATCH,
    lr: float = DEFAULT_LR,
    seed: int = 0,
) -> Tuple[FusionModel, TrainingHistory]:
    """Weighted cross-entropy with Adam and OneCycle; keeps the best validation bAcc.

    Without a validation set the training set itself selects the checkpoint.
    """
    if len(train) < 2:
        raise ValueError(f"Training needs at least 2 patients, got {len(train)}")
    if epochs < 1 or batch < 2:
        raise ValueError(f"epochs must be positive and batch at least 2, got {epochs}, {batch}")
    weights = class_weights(train.labels)
    selection = val if val is not None and len(val) > 0 else train
    if len(np.unique(selection.labels)) < 2:
        raise SingleClassError("The checkpoint selection set contains a single class")

    model = build_model(config, seed)
    shuffle_rng = np.random.default_rng([seed, 1])
    optimizer = Adam(model.parameters(), lr)
    steps_per_epoch = len(_batches(np.arange(len(train)), batch))
    schedule = TrainSchedule(max_lr=lr, total_steps=max(2, epochs * steps_per_epoch))
    logger.info(
        f"Training {'+'.join(config.branches)} on {len(train)} patients "
        f"({int(train.labels.sum())} positive), class weights {np.round(weights, 3).tolist()}"
    )

    history = TrainingHistory()
    best_bacc = -math.inf
    best_state = model.state_dict()
    step = 0
    for epoch in range(epochs):
        model.train()
        losses = []
        current_lr = lr
        for indices in _batches(shuffle_rng.permutation(len(train)), batch):
            optimizer.zero_grad()
            loss = weighted_softmax_cross_entropy(
                train.logits(model, indices), train.labels[indices], weights
            )
            loss.backward()
            current_lr = onecycle_lr(schedule, min(step, schedule.total_steps - 1))
            optimizer.step(current_lr)
            losses.append(float(loss.data))
            step += 1

        report = confusion_metrics(predict_labels(model, selection, batch), selection.labels)
        fold = report.folds[0]
        history.rows.append(
            {
                Columns.EPOCH: epoch,
                Columns.LOSS: float(np.mean(losses)),
                Columns.LR: current_lr,
                Columns.VAL_BACC: fold.bacc,
                Columns.VAL_SENS: fold.sensitivity,
                Columns.VAL_SPEC: fold.specificity,
            }
        )
        logger.debug(
            f"epoch {epoch}: loss {np.mean(losses):.4f}, "
            f"val bAcc {fold.bacc:.3f}, lr {current_lr:.2e}"
        )
        if fold.bacc > best_bacc:
            best_bacc, history.best_epoch = fold.bacc, epoch
            best_state = model.state_dict()

    model.load_state_dict(best_state)
    model.eval()
    logger.info(f"Best validation bAcc {best_bacc:.3f} at epoch {history.best_epoch}")
    return model, history
