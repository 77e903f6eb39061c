"""Amortized deformable registration: a UNet trained over image pairs."""

import logging
import math
import time
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from cbct_toxicity.common import ANATOMY_STAGE, MODALITY_STAGE
from cbct_toxicity.field import DisplacementField, deformed_fraction, jacobian_field, warp
from cbct_toxicity.nn.checkpoint import load_checkpoint, save_checkpoint
from cbct_toxicity.nn.optim import Adam, TrainSchedule, onecycle_lr
from cbct_toxicity.nn.tensor import Tensor, concatenate, no_grad
from cbct_toxicity.regnet.base import (
    BaseRegistrator,
    RegistrationError,
    RegistrationReport,
    check_stage,
)
from cbct_toxicity.regnet.unet import UNet, UNetConfig
from cbct_toxicity.sim import dir_loss, ncc
from cbct_toxicity.volio import GridMismatchError, Volume, require_same_grid

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = {MODALITY_STAGE: 1.0, ANATOMY_STAGE: 0.5}
DEFAULT_SPLIT = (0.70, 0.15, 0.15)
DEFAULT_EPOCHS = 100
DEFAULT_BATCH = 7
DEFAULT_LR = 1e-3
DEFAULT_PATIENCE = 10

Pair = Tuple[Volume, Volume]


class DirModel(BaseRegistrator):
    def __init__(
        self,
        network: UNet,
        lam: float,
        stage: str,
        dims: Tuple[int, int, int],
        spacing_mm: Tuple[float, float, float],
    ):
        check_stage(stage)
        self.network = network
        self.lam = lam
        self._stage = stage
        self.dims = tuple(dims)
        self.spacing_mm = tuple(spacing_mm)

    @property
    def config(self) -> UNetConfig:
        return self.network.config

    def predict(self, fixed: Volume, moving: Volume) -> DisplacementField:
        return predict_dvf(self, fixed, moving)


def split_indices(
    n: int, split: Sequence[float], rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded train/validation/test partition; every part gets at least one item."""
    if len(split) != 3 or abs(sum(split) - 1.0) > 1e-9 or min(split) <= 0:
        raise ValueError(f"Split must be three positive fractions summing to 1, got {split}")
    n_val = max(1, int(math.floor(split[1] * n + 0.5)))
    n_test = max(1, int(math.floor(split[2] * n + 0.5)))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise RegistrationError(f"{n} pairs leave an empty partition for split {tuple(split)}")
    order = rng.permutation(n)
    return order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]


def _pair_tensors(pairs: Sequence[Pair], indices: Sequence[int]) -> Tuple[Tensor, Tensor]:
    fixed = np.stack([pairs[i][0].data for i in indices]).astype(np.float32)
    moving = np.stack([pairs[i][1].data for i in indices]).astype(np.float32)
    return Tensor(fixed), Tensor(moving)


def _forward(network: UNet, fixed: Tensor, moving: Tensor) -> Tensor:
    return network(concatenate([fixed, moving], axis=1))


def _validation_loss(
    network: UNet, pairs: Sequence[Pair], indices: Sequence[int], lam: float, spacing
) -> float:
    network.eval()
    losses = []
    with no_grad():
        for i in indices:
            fixed, moving = _pair_tensors(pairs, [i])
            flow = _forward(network, fixed, moving)
            losses.append(float(dir_loss(fixed, moving, flow, lam, spacing_mm=spacing).data))
    network.train()
    return float(np.mean(losses))


def train_dir(
    pairs: Sequence[Pair],
    lam: float,
    stage: str,
    epochs: int = DEFAULT_EPOCHS,
    batch: int = DEFAULT_BATCH,
    split: Sequence[float] = DEFAULT_SPLIT,
    lr: float = DEFAULT_LR,
    patience: int = DEFAULT_PATIENCE,
    seed: int = 0,
    config: Optional[UNetConfig] = None,
) -> Tuple[DirModel, RegistrationReport]:
    """Train a UNet on ``(fixed, moving)`` pairs with early stopping on validation loss."""
    check_stage(stage)
    if len(pairs) < 3:
        raise RegistrationError(f"Training needs at least 3 pairs, got {len(pairs)}")
    if epochs < 1 or batch < 1:
        raise ValueError(f"epochs and batch must be positive, got {epochs} and {batch}")
    reference = pairs[0][0]
    for fixed, moving in pairs:
        require_same_grid(reference, fixed, "training pairs")
        require_same_grid(reference, moving, "training pairs")

    config = config or UNetConfig()
    rng = np.random.default_rng(seed)
    init_rng, split_rng, shuffle_rng = rng.spawn(3)
    train_idx, val_idx, test_idx = split_indices(len(pairs), split, split_rng)
    logger.info(
        f"Training {stage} DIR (lambda={lam}) on {len(train_idx)} pairs, "
        f"validating on {len(val_idx)}, holding out {len(test_idx)}"
    )

    network = UNet(config, init_rng)
    optimizer = Adam(network.parameters(), lr)
    steps_per_epoch = math.ceil(len(train_idx) / batch)
    schedule = TrainSchedule(max_lr=lr, total_steps=max(2, epochs * steps_per_epoch))
    spacing = reference.spacing_mm

    start = time.perf_counter()
    best_loss = math.inf
    best_state = network.state_dict()
    best_epoch = 0
    history = []
    step = 0
    epochs_run = 0
    for epoch in range(epochs):
        epochs_run = epoch + 1
        order = shuffle_rng.permutation(train_idx)
        train_losses = []
        for first in range(0, len(order), batch):
            fixed, moving = _pair_tensors(pairs, order[first : first + batch])
            optimizer.zero_grad()
            flow = _forward(network, fixed, moving)
            loss = dir_loss(fixed, moving, flow, lam, spacing_mm=spacing)
            loss.backward()
            current_lr = onecycle_lr(schedule, min(step, schedule.total_steps - 1))
            optimizer.step(current_lr)
            train_losses.append(float(loss.data))
            step += 1

        val_loss = _validation_loss(network, pairs, val_idx, lam, spacing)
        history.append(
            {
                "epoch": epoch,
                "loss": float(np.mean(train_losses)),
                "lr": current_lr,
                "val_loss": val_loss,
            }
        )
        logger.info(
            f"{stage} epoch {epoch}: train loss {history[-1]['loss']:.4f}, val loss {val_loss:.4f}"
        )
        if val_loss < best_loss:
            best_loss, best_epoch = val_loss, epoch
            best_state = network.state_dict()
        elif epoch - best_epoch >= patience:
            logger.info(f"Early stopping at epoch {epoch}, best epoch {best_epoch}")
            break

    network.load_state_dict(best_state)
    network.eval()
    model = DirModel(network, lam, stage, reference.dims, reference.spacing_mm)

    val_ncc, fractions = [], []
    for i in val_idx:
        fixed, moving = pairs[i]
        dvf = predict_dvf(model, fixed, moving)
        val_ncc.append(ncc(fixed, warp(moving, dvf)))
        fractions.append(deformed_fraction(jacobian_field(dvf)) if min(dvf.dims) >= 3 else 0.0)

    report = RegistrationReport(
        engine="unet",
        stage=stage,
        lam=lam,
        final_loss=best_loss,
        ncc=float(np.mean(val_ncc)),
        deformed_fraction=float(np.mean(fractions)),
        deformed_fraction_stats={
            "mean": float(np.mean(fractions)),
            "std": float(np.std(fractions)),
            "min": float(np.min(fractions)),
            "max": float(np.max(fractions)),
        },
        iterations=step,
        epochs=epochs_run,
        wall_time_s=time.perf_counter() - start,
        history=history,
        extra={"best_epoch": best_epoch, "test_indices": [int(i) for i in test_idx]},
    )
    logger.info(f"{stage} DIR done: validation NCC {report.ncc:.4f}, best epoch {best_epoch}")
    return model, report


def predict_dvf(model: DirModel, fixed: Volume, moving: Volume) -> DisplacementField:
    require_same_grid(fixed, moving, "fixed and moving images")
    if fixed.dims != model.dims or not np.allclose(fixed.spacing_mm, model.spacing_mm):
        raise GridMismatchError(
            f"Model trained on {model.dims}@{model.spacing_mm}, got {fixed.dims}@{fixed.spacing_mm}"
        )
    model.network.eval()
    with no_grad():
        fixed_t = Tensor(fixed.data[np.newaxis].astype(np.float32))
        moving_t = Tensor(moving.data[np.newaxis].astype(np.float32))
        flow = _forward(model.network, fixed_t, moving_t)
    return DisplacementField(flow.data[0], fixed.spacing_mm, fixed.origin_mm)


def save_dir_model(model: DirModel, path: Union[str, Path]):
    metadata = {
        "kind": "dir_model",
        "stage": model.stage,
        "lambda": model.lam,
        "dims": list(model.dims),
        "spacing_mm": list(model.spacing_mm),
        "unet": model.config.to_dict(),
    }
    save_checkpoint(path, model.network.state_dict(), metadata)


def load_dir_model(path: Union[str, Path]) -> DirModel:
    state, metadata = load_checkpoint(path)
    if metadata.get("kind") != "dir_model":
        raise ValueError(f"{path} does not hold a registration model")
    config = UNetConfig.from_dict(metadata["unet"])
    network = UNet(config, np.random.default_rng(0))
    network.load_state_dict(state)
    network.eval()
    return DirModel(
        network, metadata["lambda"], metadata["stage"], metadata["dims"], metadata["spacing_mm"]
    )


def stage_pairs(
    pct_series: List[Volume], cbct_series: List[List[Volume]], stage: str
) -> List[Pair]:
    """Training pairs per stage: pCT onto CBCT_0, or CBCT_0 onto each later CBCT.

    ``cbct_series[p]`` starts with fraction 0.
    """
    check_stage(stage)
    pairs: List[Pair] = []
    for pct, series in zip(pct_series, cbct_series):
        if stage == MODALITY_STAGE:
            pairs.append((series[0], pct))
        else:
            pairs.extend((cbct_t, series[0]) for cbct_t in series[1:])
    return pairs
