from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from cbct_toxicity.nn import functional as F
from cbct_toxicity.nn.layers import Conv3d, Module, Parameter
from cbct_toxicity.nn.tensor import ShapeError, Tensor, concatenate

FLOW_INIT_STD = 1e-5


@dataclass(frozen=True)
class UNetConfig:
    encoder_channels: Tuple[int, ...] = (16, 32, 32, 32)
    decoder_channels: Tuple[int, ...] = (32, 32, 32, 32, 32, 16, 16)
    in_channels: int = 2
    slope: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(int(c) for c in self.encoder_channels))
        object.__setattr__(self, "decoder_channels", tuple(int(c) for c in self.decoder_channels))
        if not self.encoder_channels:
            raise ValueError("UNet needs at least one encoder level")
        if len(self.decoder_channels) < len(self.encoder_channels):
            raise ValueError(
                f"{len(self.decoder_channels)} decoder widths cannot undo "
                f"{len(self.encoder_channels)} encoder levels"
            )

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "UNetConfig":
        return cls(**data)


class ConvBlock(Module):
    def __init__(self, in_channels: int, out_channels: int, stride: int, slope: float, rng):
        super().__init__()
        self.conv = Conv3d(in_channels, out_channels, 3, rng, stride=stride, padding=1)
        self.slope = slope

    def forward(self, x: Tensor) -> Tensor:
        return F.leaky_relu(self.conv(x), self.slope)


class UNet(Module):
    """Encoder of stride-2 convolutions, nearest-upsampling decoder with skips,
    and a 3-channel flow head producing a displacement in mm."""

    def __init__(self, config: UNetConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        enc = config.encoder_channels
        dec = config.decoder_channels
        skip_channels = [config.in_channels] + list(enc[:-1])

        self.encoder: List[ConvBlock] = []
        previous = config.in_channels
        for width in enc:
            self.encoder.append(ConvBlock(previous, width, 2, config.slope, rng))
            previous = width

        self.decoder: List[ConvBlock] = []
        for level, width in enumerate(dec[: config.levels]):
            self.decoder.append(ConvBlock(previous, width, 1, config.slope, rng))
            previous = width + skip_channels[config.levels - 1 - level]

        self.refine: List[ConvBlock] = []
        for width in dec[config.levels :]:
            self.refine.append(ConvBlock(previous, width, 1, config.slope, rng))
            previous = width

        self.flow = Conv3d(previous, 3, 3, rng, padding=1)
        self.flow.weight = Parameter(
            rng.normal(0.0, FLOW_INIT_STD, size=self.flow.weight.shape).astype(np.float32)
        )

    def forward(self, x: Tensor) -> Tensor:
        factor = 2**self.config.levels
        if x.ndim != 5 or x.shape[1] != self.config.in_channels:
            raise ShapeError(f"UNet expects (N, {self.config.in_channels}, D, H, W), got {x.shape}")
        if any(n % factor for n in x.shape[2:]):
            raise ShapeError(f"Spatial dims {x.shape[2:]} must be divisible by {factor}")

        skips = [x]
        for block in self.encoder:
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.decoder:
            x = F.upsample_nearest(block(x), 2)
            x = concatenate([x, skips.pop()], axis=1)
        for block in self.refine:
            x = block(x)
        return self.flow(x)
