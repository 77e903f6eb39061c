import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np

from cbct_toxicity.common import CBCT_BRANCH, CLINICAL_BRANCH, JACOBIAN_BRANCH
from cbct_toxicity.nn import functional as F
from cbct_toxicity.nn.checkpoint import load_checkpoint, save_checkpoint
from cbct_toxicity.nn.layers import BatchNorm, Dropout, Linear, Module, ReLU, Sequential
from cbct_toxicity.nn.tensor import ShapeError, Tensor, concatenate, no_grad
from cbct_toxicity.toxnet.resnet import ResNetBranch, ResNetBranchConfig
from cbct_toxicity.volio import MaskVolume, Volume

logger = logging.getLogger(__name__)

CLINICAL_WIDTHS = (64, 128, 256)
CLINICAL_DROPOUT = 0.4
NUM_CLASSES = 2


class BranchInputError(ValueError):
    pass


@dataclass(frozen=True)
class ClinicalBranchConfig:
    in_features: int = 35
    widths: Tuple[int, ...] = CLINICAL_WIDTHS
    dropout: float = CLINICAL_DROPOUT

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) != 3:
            raise ValueError(f"Clinical branch has exactly 3 layers, got {self.widths}")

    @property
    def latent_dim(self) -> int:
        return self.widths[-1]


class ClinicalBranch(Module):
    """Linear, batch norm, ReLU and dropout per layer."""

    def __init__(self, config: ClinicalBranchConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        layers: List[Module] = []
        previous = config.in_features
        init_rng, dropout_rng = rng.spawn(2)
        for width in config.widths:
            layers += [
                Linear(previous, width, init_rng),
                BatchNorm(width),
                ReLU(),
                Dropout(config.dropout, dropout_rng),
            ]
            previous = width
        self.mlp = Sequential(*layers)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def forward(self, x: Tensor) -> Tensor:
        return self.mlp(x)


@dataclass(frozen=True)
class FusionConfig:
    cbct: Optional[ResNetBranchConfig] = None
    jacobian: Optional[ResNetBranchConfig] = None
    clinical: Optional[ClinicalBranchConfig] = None

    def __post_init__(self):
        if not self.branches:
            raise ValueError("At least one branch must be enabled")

    @property
    def branches(self) -> Tuple[str, ...]:
        present = {
            CLINICAL_BRANCH: self.clinical,
            CBCT_BRANCH: self.cbct,
            JACOBIAN_BRANCH: self.jacobian,
        }
        return tuple(name for name, cfg in present.items() if cfg is not None)

    def to_dict(self) -> Dict[str, Any]:
        def image(cfg: Optional[ResNetBranchConfig]):
            return None if cfg is None else cfg.to_dict()

        clinical = None
        if self.clinical is not None:
            clinical = {
                "in_features": self.clinical.in_features,
                "widths": list(self.clinical.widths),
                "dropout": self.clinical.dropout,
            }
        return {"cbct": image(self.cbct), "jacobian": image(self.jacobian), "clinical": clinical}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FusionConfig":
        def image(entry):
            return None if entry is None else ResNetBranchConfig(**entry)

        clinical = data.get("clinical")
        return cls(
            cbct=image(data.get("cbct")),
            jacobian=image(data.get("jacobian")),
            clinical=None if clinical is None else ClinicalBranchConfig(**clinical),
        )


class FusionModel(Module):
    def __init__(self, config: FusionConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        cbct_rng, jacobian_rng, clinical_rng, decision_rng = rng.spawn(4)
        self.cbct = ResNetBranch(config.cbct, cbct_rng) if config.cbct else None
        self.jacobian = ResNetBranch(config.jacobian, jacobian_rng) if config.jacobian else None
        self.clinical = ClinicalBranch(config.clinical, clinical_rng) if config.clinical else None
        self.decision = Linear(self.decision_width, NUM_CLASSES, decision_rng)

    @property
    def decision_width(self) -> int:
        return sum(b.latent_dim for b in (self.clinical, self.cbct, self.jacobian) if b is not None)

    def forward(
        self,
        cbct: Optional[Tensor] = None,
        jacobian: Optional[Tensor] = None,
        clinical: Optional[Tensor] = None,
        mask: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Logits ``(N, 2)``; images are multiplied by ``mask`` first."""
        latents = []
        inputs = (
            (self.clinical, clinical, CLINICAL_BRANCH, False),
            (self.cbct, cbct, CBCT_BRANCH, True),
            (self.jacobian, jacobian, JACOBIAN_BRANCH, True),
        )
        for branch, value, name, is_image in inputs:
            if branch is None:
                continue
            if value is None:
                raise BranchInputError(f"Missing input for the enabled `{name}` branch")
            if is_image and mask is not None:
                if mask.shape[2:] != value.shape[2:]:
                    raise ShapeError(f"Mask {mask.shape} does not match `{name}` {value.shape}")
                value = value * mask.astype(value.dtype)
            latents.append(branch(value))
        fused = latents[0] if len(latents) == 1 else concatenate(latents, axis=1)
        return self.decision(fused)


def build_model(config: FusionConfig, seed: int) -> FusionModel:
    model = FusionModel(config, np.random.default_rng(seed))
    logger.info(
        f"Built {'+'.join(config.branches)} model: {model.num_parameters()} parameters, "
        f"decision width {model.decision_width}"
    )
    return model


def _batch_of(vol: Optional[Volume]) -> Optional[Tensor]:
    return None if vol is None else Tensor(vol.data[np.newaxis].astype(np.float32))


def forward(
    model: FusionModel,
    cbct: Optional[Volume] = None,
    jf: Optional[Volume] = None,
    clinical: Optional[np.ndarray] = None,
    masks: Optional[MaskVolume] = None,
) -> np.ndarray:
    """Class probabilities ``(p_negative, p_positive)`` for one patient."""
    clinical_t = None
    if clinical is not None:
        clinical_t = Tensor(np.asarray(clinical, dtype=np.float32).reshape(1, -1))
    mask = None if masks is None else masks.data[np.newaxis]
    with no_grad():
        logits = model(_batch_of(cbct), _batch_of(jf), clinical_t, mask)
        return F.softmax(logits, axis=1).data[0]


def forward_batch(
    model: FusionModel,
    cbct: Optional[np.ndarray] = None,
    jacobian: Optional[np.ndarray] = None,
    clinical: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Logits for stacked ``(N, C, D, H, W)`` images and ``(N, F)`` clinical rows."""

    def wrap(array):
        return None if array is None else Tensor(array)

    return model(wrap(cbct), wrap(jacobian), wrap(clinical), mask)


def save_fusion_model(
    model: FusionModel, path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None
):
    descriptor = {"kind": "fusion_model", "architecture": model.config.to_dict()}
    descriptor.update(metadata or {})
    save_checkpoint(path, model.state_dict(), descriptor)


def load_fusion_model(path: Union[str, Path]) -> Tuple[FusionModel, Dict[str, Any]]:
    state, metadata = load_checkpoint(path)
    if metadata.get("kind") != "fusion_model":
        raise ValueError(f"{path} does not hold a toxicity model")
    model = FusionModel(FusionConfig.from_dict(metadata["architecture"]), np.random.default_rng(0))
    model.load_state_dict(state)
    model.eval()
    return model, metadata
