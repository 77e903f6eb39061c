import logging
from dataclasses import dataclass, field
from typing import Callable, List, Sequence

import numpy as np

from cbct_toxicity.nn.tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 1e-4
RELATIVE_STEP = 1e-5


class GradcheckError(Exception):
    pass


@dataclass
class GradcheckResult:
    max_rel_error: float
    tolerance: float
    checked: int
    per_input: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _evaluate(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> float:
    with no_grad():
        value = fn(*inputs).data
    if value.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {value.shape}")
    value = float(value.reshape(-1)[0])
    if not np.isfinite(value):
        raise GradcheckError("Function produced a non-finite value")
    return value


def gradcheck(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    max_checks: int = 64,
    seed: int = 0,
) -> GradcheckResult:
    """Compare reverse-mode gradients with central differences in double precision.

    Inputs are cast to float64 in place. At most ``max_checks`` entries per
    input are perturbed, chosen with a seeded generator. The error of one input
    is ``max|analytic - numeric|`` over the larger of the two gradient scales.
    """
    for tensor in inputs:
        tensor.data = tensor.data.astype(np.float64)
        tensor.grad = None
        tensor.requires_grad = True

    output = fn(*inputs)
    if output.data.size != 1:
        raise ValueError(f"gradcheck needs a scalar function, got shape {output.shape}")
    if not np.all(np.isfinite(output.data)):
        raise GradcheckError("Function produced a non-finite value")
    output.backward()

    rng = np.random.default_rng(seed)
    per_input = []
    checked = 0
    for index, tensor in enumerate(inputs):
        analytic_full = (
            np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad.reshape(tensor.shape)
        )
        if tensor.size <= max_checks:
            entries = np.arange(tensor.size)
        else:
            entries = np.sort(rng.choice(tensor.size, size=max_checks, replace=False))

        analytic = analytic_full.reshape(-1)[entries]
        numeric = np.empty(len(entries))
        flat = tensor.data.reshape(-1)
        for k, entry in enumerate(entries):
            original = flat[entry]
            h = RELATIVE_STEP * max(1.0, abs(original))
            flat[entry] = original + h
            plus = _evaluate(fn, inputs)
            flat[entry] = original - h
            minus = _evaluate(fn, inputs)
            flat[entry] = original
            numeric[k] = (plus - minus) / (2.0 * h)
        checked += len(entries)

        scale = max(np.abs(numeric).max(initial=0.0), np.abs(analytic).max(initial=0.0), 1e-12)
        error = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
        logger.debug(f"gradcheck input {index} {tensor.shape}: rel error {error:.3e}")
        per_input.append(error)

    return GradcheckResult(
        max_rel_error=max(per_input, default=0.0),
        tolerance=tolerance,
        checked=checked,
        per_input=per_input,
    )
