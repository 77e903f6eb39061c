from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

from cbct_toxicity.common import STAGES
from cbct_toxicity.field import DisplacementField
from cbct_toxicity.volio import Volume


class RegistrationError(Exception):
    pass


class DivergenceError(RegistrationError):
    """Raised on a non-finite loss; keeps the last finite field."""

    def __init__(self, message: str, last_field: Optional[DisplacementField], iteration: int):
        super().__init__(message)
        self.last_field = last_field
        self.iteration = iteration


class StageMismatchError(ValueError):
    pass


@dataclass
class RegistrationReport:
    engine: str
    final_loss: float
    ncc: float
    stage: Optional[str] = None
    lam: Optional[float] = None
    deformed_fraction: Optional[float] = None
    deformed_fraction_stats: Dict[str, float] = field(default_factory=dict)
    iterations: int = 0
    epochs: int = 0
    wall_time_s: float = 0.0
    history: List[Dict[str, float]] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 - 1e-9 <= self.ncc <= 1.0 + 1e-9:
            raise ValueError(f"NCC must lie in [-1, 1], got {self.ncc}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class BaseRegistrator(ABC):
    _stage: str

    @abstractmethod
    def predict(self, fixed: Volume, moving: Volume) -> DisplacementField:
        pass

    @property
    def stage(self) -> str:
        return self._stage


def check_stage(stage: str):
    if stage not in STAGES:
        raise ValueError(f"Unsupported stage `{stage}`, expected one of {STAGES}")


def require_stage(registrator: BaseRegistrator, expected: str):
    if registrator.stage != expected:
        raise StageMismatchError(
            f"Expected a `{expected}` registrator, got one trained for `{registrator.stage}`"
        )
