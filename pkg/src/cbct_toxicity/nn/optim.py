import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from cbct_toxicity.nn.layers import Parameter

DEFAULT_BETA1 = 0.9
DEFAULT_BETA2 = 0.999
DEFAULT_EPS = 1e-8


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    lr: float,
    beta1: float = DEFAULT_BETA1,
    beta2: float = DEFAULT_BETA2,
    eps: float = DEFAULT_EPS,
):
    """One bias-corrected Adam update, in place; state lives on each parameter."""
    if len(params) != len(grads):
        raise ValueError(f"Got {len(params)} parameters but {len(grads)} gradients")
    for param, grad in zip(params, grads):
        if grad is None:
            continue
        if grad.shape != param.shape:
            raise ValueError(f"Gradient {grad.shape} does not match parameter {param.shape}")
        if param.exp_avg is None:
            param.exp_avg = np.zeros_like(param.data)
            param.exp_avg_sq = np.zeros_like(param.data)
        param.step += 1
        param.exp_avg = beta1 * param.exp_avg + (1.0 - beta1) * grad
        param.exp_avg_sq = beta2 * param.exp_avg_sq + (1.0 - beta2) * grad * grad
        m_hat = param.exp_avg / (1.0 - beta1**param.step)
        v_hat = param.exp_avg_sq / (1.0 - beta2**param.step)
        param.data = (param.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(param.dtype)


class Adam:
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float,
        beta1: float = DEFAULT_BETA1,
        beta2: float = DEFAULT_BETA2,
        eps: float = DEFAULT_EPS,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, lr: Optional[float] = None):
        adam_step(
            self.params,
            [p.grad for p in self.params],
            self.lr if lr is None else lr,
            self.beta1,
            self.beta2,
            self.eps,
        )

    def zero_grad(self):
        for p in self.params:
            p.grad = None


@dataclass(frozen=True)
class TrainSchedule:
    max_lr: float
    total_steps: int
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 2:
            raise ValueError(f"OneCycle needs at least 2 steps, got {self.total_steps}")
        if not 0.0 < self.pct_start < 1.0:
            raise ValueError(f"pct_start must be in (0, 1), got {self.pct_start}")
        if self.div_factor <= 1.0 or self.final_div_factor <= 1.0:
            raise ValueError("div_factor and final_div_factor must exceed 1")

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.max_lr / self.final_div_factor

    @property
    def peak_step(self) -> int:
        peak = int(math.floor(self.pct_start * self.total_steps + 0.5))
        return min(max(peak, 1), self.total_steps - 1)


def _cosine(start: float, end: float, progress: float) -> float:
    return end + (start - end) * (1.0 + math.cos(math.pi * progress)) / 2.0


def onecycle_lr(schedule: TrainSchedule, step: int) -> float:
    if not 0 <= step < schedule.total_steps:
        raise ValueError(f"Step {step} outside [0, {schedule.total_steps})")
    peak = schedule.peak_step
    if step <= peak:
        return _cosine(schedule.initial_lr, schedule.max_lr, step / peak)
    last = schedule.total_steps - 1
    return _cosine(schedule.max_lr, schedule.final_lr, (step - peak) / (last - peak))
