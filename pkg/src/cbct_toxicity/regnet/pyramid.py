from typing import List

import numpy as np
from scipy import ndimage

from cbct_toxicity.interpolation import identity_grid, sample_trilinear
from cbct_toxicity.volio import Volume

MIN_LEVEL_EXTENT = 4
SMOOTHING_SIGMA = 1.0


def downsample(vol: Volume) -> Volume:
    """Gaussian smoothing then every other voxel; voxel 0 keeps its position."""
    smoothed = np.stack(
        [ndimage.gaussian_filter(channel, SMOOTHING_SIGMA, mode="nearest") for channel in vol.data]
    )
    data = smoothed[:, ::2, ::2, ::2].astype(vol.data.dtype)
    spacing = tuple(2.0 * s for s in vol.spacing_mm)
    return Volume(data, spacing, vol.origin_mm)


def gaussian_pyramid(vol: Volume, levels: int) -> List[Volume]:
    """Finest level first; stops early once an axis would drop below 4 voxels."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    pyramid = [vol]
    while len(pyramid) < levels and min(pyramid[-1].dims) >= 2 * MIN_LEVEL_EXTENT:
        pyramid.append(downsample(pyramid[-1]))
    return pyramid


def upsample_field(coarse: np.ndarray, fine_shape_zyx) -> np.ndarray:
    """Carry a ``(C, z, y, x)`` field from level ``k + 1`` onto level ``k``'s grid."""
    coords = identity_grid(fine_shape_zyx) / 2.0
    return sample_trilinear(coarse, coords)
