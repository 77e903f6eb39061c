"""3D residual feature extractors (ResNet-34 and ResNet-50 layouts)."""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

from cbct_toxicity.nn import functional as F
from cbct_toxicity.nn.layers import BatchNorm, Conv3d, Module
from cbct_toxicity.nn.tensor import Tensor

STAGE_BLOCKS = (3, 4, 6, 3)
BOTTLENECK_EXPANSION = 4


@dataclass(frozen=True)
class ResNetBranchConfig:
    variant: int = 34
    in_channels: int = 1
    base_width: int = 64

    def __post_init__(self):
        if self.variant not in (34, 50):
            raise ValueError(f"Unsupported ResNet variant `{self.variant}`")
        if self.in_channels < 1 or self.base_width < 1:
            raise ValueError("in_channels and base_width must be positive")

    @property
    def stage_blocks(self) -> Tuple[int, ...]:
        return STAGE_BLOCKS

    @property
    def bottleneck(self) -> bool:
        return self.variant == 50

    @property
    def latent_dim(self) -> int:
        expansion = BOTTLENECK_EXPANSION if self.bottleneck else 1
        return self.base_width * 8 * expansion

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class BasicBlock(Module):
    def __init__(self, in_channels: int, width: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv1 = Conv3d(in_channels, width, 3, rng, stride=stride, padding=1, bias=False)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv3d(width, width, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm(width)
        self.shortcut = None
        if stride != 1 or in_channels != width:
            self.shortcut = Conv3d(in_channels, width, 1, rng, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm(width)
        self.out_channels = width

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        identity = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.relu(out + identity)


class Bottleneck(Module):
    def __init__(self, in_channels: int, width: int, stride: int, rng: np.random.Generator):
        super().__init__()
        out_channels = width * BOTTLENECK_EXPANSION
        self.conv1 = Conv3d(in_channels, width, 1, rng, bias=False)
        self.bn1 = BatchNorm(width)
        self.conv2 = Conv3d(width, width, 3, rng, stride=stride, padding=1, bias=False)
        self.bn2 = BatchNorm(width)
        self.conv3 = Conv3d(width, out_channels, 1, rng, bias=False)
        self.bn3 = BatchNorm(out_channels)
        self.shortcut = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv3d(in_channels, out_channels, 1, rng, stride=stride, bias=False)
            self.shortcut_bn = BatchNorm(out_channels)
        self.out_channels = out_channels

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = F.relu(self.bn2(self.conv2(out)))
        out = self.bn3(self.conv3(out))
        identity = x if self.shortcut is None else self.shortcut_bn(self.shortcut(x))
        return F.relu(out + identity)


class ResNetBranch(Module):
    """Image ``(N, C, D, H, W)`` to a latent vector ``(N, latent_dim)``."""

    def __init__(self, config: ResNetBranchConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        width = config.base_width
        self.stem = Conv3d(config.in_channels, width, 7, rng, stride=2, padding=3, bias=False)
        self.stem_bn = BatchNorm(width)

        block_type = Bottleneck if config.bottleneck else BasicBlock
        self.blocks: List[Module] = []
        channels = width
        for stage, count in enumerate(config.stage_blocks):
            stage_width = width * 2**stage
            for index in range(count):
                stride = 2 if stage > 0 and index == 0 else 1
                block = block_type(channels, stage_width, stride, rng)
                self.blocks.append(block)
                channels = block.out_channels

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def forward(self, x: Tensor) -> Tensor:
        x = F.relu(self.stem_bn(self.stem(x)))
        x = F.max_pool3d(x, kernel=3, stride=2, padding=1)
        for block in self.blocks:
            x = block(x)
        return F.global_avg_pool(x)
