"""Volume data model, the v3j file format and image preprocessing."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from cbct_toxicity.interpolation import identity_grid, sample_trilinear

logger = logging.getLogger(__name__)

V3J_DTYPE = "f32le"
HISTOGRAM_BINS = 256

PathLike = Union[str, Path]
Vec3 = Tuple[float, float, float]


class VolumeFormatError(ValueError):
    pass


class GridMismatchError(ValueError):
    pass


class DegenerateRangeError(ValueError):
    pass


class DegenerateHistogramError(ValueError):
    pass


def _vec3(values: Sequence[float], name: str) -> Vec3:
    if len(values) != 3:
        raise ValueError(f"{name} must have 3 components, got {len(values)}")
    return (float(values[0]), float(values[1]), float(values[2]))


@dataclass(frozen=True)
class Volume:
    """A 3D grid of ``C`` channels; ``data`` is laid out ``(C, z, y, x)``."""

    data: np.ndarray
    spacing_mm: Vec3 = (1.0, 1.0, 1.0)
    origin_mm: Vec3 = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = self._coerce(np.array(self.data, copy=True))
        if data.ndim == 3:
            data = data[np.newaxis]
        if data.ndim != 4 or min(data.shape) < 1:
            raise ValueError(f"Volume data must be (C, z, y, x), got {data.shape}")
        spacing = _vec3(self.spacing_mm, "spacing_mm")
        if min(spacing) <= 0:
            raise ValueError(f"Spacing must be positive, got {spacing}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", _vec3(self.origin_mm, "origin_mm"))

    @staticmethod
    def _coerce(data: np.ndarray) -> np.ndarray:
        if data.dtype in (np.float32, np.float64):
            return data
        return data.astype(np.float32)

    @property
    def dims(self) -> Tuple[int, int, int]:
        _, nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape_zyx(self) -> Tuple[int, int, int]:
        return self.data.shape[1:]

    def like(self, data: np.ndarray, origin_mm: Optional[Vec3] = None) -> "Volume":
        return Volume(data, self.spacing_mm, self.origin_mm if origin_mm is None else origin_mm)

    def same_grid(self, other: "Volume") -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing_mm, other.spacing_mm, rtol=0, atol=1e-9)
            and np.allclose(self.origin_mm, other.origin_mm, rtol=0, atol=1e-9)
        )

    def voxel_to_physical(self, voxel: np.ndarray) -> np.ndarray:
        """``(3, ...)`` voxel coordinates (x, y, z) to millimetres."""
        voxel = np.asarray(voxel, dtype=np.float64)
        shape = (3,) + (1,) * (voxel.ndim - 1)
        return np.reshape(self.origin_mm, shape) + voxel * np.reshape(self.spacing_mm, shape)

    def physical_to_voxel(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        shape = (3,) + (1,) * (points.ndim - 1)
        return (points - np.reshape(self.origin_mm, shape)) / np.reshape(self.spacing_mm, shape)

    def physical_grid(self) -> np.ndarray:
        return self.voxel_to_physical(identity_grid(self.shape_zyx))

    def center_mm(self) -> np.ndarray:
        return self.voxel_to_physical((np.array(self.dims, dtype=np.float64) - 1.0) / 2.0)


@dataclass(frozen=True)
class MaskVolume(Volume):
    """Binary mask sharing the grid of the volume it was derived from."""

    @staticmethod
    def _coerce(data: np.ndarray) -> np.ndarray:
        values = np.unique(data)
        if not np.all(np.isin(values, (0, 1))):
            raise ValueError("Mask values must be 0 or 1")
        return data.astype(np.uint8)


def require_same_grid(a: Volume, b: Volume, what: str = "volumes"):
    if not a.same_grid(b):
        raise GridMismatchError(
            f"Grid mismatch between {what}: {a.dims}@{a.spacing_mm} vs {b.dims}@{b.spacing_mm}"
        )


def _raw_path(header_path: Path) -> Path:
    return header_path.with_name(header_path.stem + ".raw")


def read_volume(path: PathLike) -> Volume:
    header_path = Path(path)
    if not header_path.is_file():
        raise FileNotFoundError(f"Volume header not found: {header_path}")
    with open(header_path, "r", encoding="utf-8") as f:
        header = json.load(f)
    for key in ("dims", "spacing_mm", "origin_mm", "channels", "dtype", "data"):
        if key not in header:
            raise VolumeFormatError(f"Header {header_path} is missing `{key}`")
    if header["dtype"] != V3J_DTYPE:
        raise VolumeFormatError(f"Unsupported dtype `{header['dtype']}`")
    nx, ny, nz = (int(d) for d in header["dims"])
    channels = int(header["channels"])
    if min(nx, ny, nz, channels) < 1:
        raise VolumeFormatError(f"Invalid dims/channels in {header_path}")

    raw_path = header_path.parent / header["data"]
    if not raw_path.is_file():
        raise FileNotFoundError(f"Volume data not found: {raw_path}")
    raw = np.fromfile(raw_path, dtype="<f4")
    expected = channels * nx * ny * nz
    if raw.size != expected or raw_path.stat().st_size != expected * 4:
        raise VolumeFormatError(
            f"Header claims {expected} values but {raw_path} holds {raw.size}"
        )
    data = raw.astype(np.float32).reshape(channels, nz, ny, nx)
    return Volume(data, header["spacing_mm"], header["origin_mm"])


def write_volume(vol: Volume, path: PathLike):
    header_path = Path(path)
    raw_path = _raw_path(header_path)
    header = {
        "dims": list(vol.dims),
        "spacing_mm": list(vol.spacing_mm),
        "origin_mm": list(vol.origin_mm),
        "channels": vol.channels,
        "dtype": V3J_DTYPE,
        "data": raw_path.name,
    }
    with open(raw_path, "wb") as f:
        f.write(np.ascontiguousarray(vol.data, dtype="<f4").tobytes())
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
        f.write("\n")


def read_mask(path: PathLike) -> MaskVolume:
    vol = read_volume(path)
    return MaskVolume(vol.data, vol.spacing_mm, vol.origin_mm)


def write_mask(mask: MaskVolume, path: PathLike):
    write_volume(Volume(mask.data.astype(np.float32), mask.spacing_mm, mask.origin_mm), path)


def _half_up(value: float) -> int:
    return int(np.floor(value + 0.5))


def resample_isotropic(vol: Volume, target_spacing_mm: float) -> Volume:
    if target_spacing_mm <= 0:
        raise ValueError(f"Target spacing must be positive, got {target_spacing_mm}")
    t = float(target_spacing_mm)
    new_dims = [
        max(1, _half_up(n * s / t)) for n, s in zip(vol.dims, vol.spacing_mm)
    ]
    nx, ny, nz = new_dims
    # output voxel j sits at origin + t*j, i.e. source voxel t*j/s
    coords = identity_grid((nz, ny, nx)) * (
        t / np.reshape(vol.spacing_mm, (3, 1, 1, 1))
    )
    data = sample_trilinear(vol.data, coords).astype(vol.data.dtype)
    logger.debug(f"Resampled {vol.dims}@{vol.spacing_mm} to {tuple(new_dims)}@{t}")
    return Volume(data, (t, t, t), vol.origin_mm)


def normalize_intensity(vol: Volume) -> Volume:
    data = vol.data.astype(np.float64)
    lo, hi = data.min(), data.max()
    if not hi > lo:
        raise DegenerateRangeError("Cannot normalize a constant volume")
    scaled = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return vol.like(scaled.astype(vol.data.dtype))


def crop_centered(
    vol: Volume, center_voxel: Sequence[int], size: Sequence[int]
) -> Volume:
    """Fixed-size crop around ``center_voxel`` (x, y, z); outside is zero."""
    size = [int(s) for s in size]
    if len(size) != 3 or min(size) < 1:
        raise ValueError(f"Crop size must be 3 positive ints, got {size}")
    center = [int(c) for c in center_voxel]
    start = [c - s // 2 for c, s in zip(center, size)]

    out = np.zeros((vol.channels, size[2], size[1], size[0]), dtype=vol.data.dtype)
    src_slices, dst_slices = [], []
    # axes in (z, y, x) order for slicing
    for n, s, st in zip(reversed(vol.dims), reversed(size), reversed(start)):
        lo, hi = max(st, 0), min(st + s, n)
        if hi <= lo:
            return vol.like(out, _cropped_origin(vol, start))
        src_slices.append(slice(lo, hi))
        dst_slices.append(slice(lo - st, hi - st))
    out[(slice(None), *dst_slices)] = vol.data[(slice(None), *src_slices)]
    return Volume(out, vol.spacing_mm, _cropped_origin(vol, start))


def _cropped_origin(vol: Volume, start: Sequence[int]) -> Vec3:
    origin = np.asarray(vol.origin_mm) + np.asarray(start) * np.asarray(vol.spacing_mm)
    return (float(origin[0]), float(origin[1]), float(origin[2]))


def adaptive_mask(vol: Volume) -> MaskVolume:
    """Otsu foreground, 6-connected closing, largest connected component."""
    values = vol.data[0].astype(np.float64)
    hist, _ = np.histogram(values, bins=HISTOGRAM_BINS)
    if np.count_nonzero(hist) < 2:
        raise DegenerateHistogramError("Intensity histogram occupies a single bin")
    threshold = threshold_otsu(values, nbins=HISTOGRAM_BINS)
    foreground = values > threshold

    structure = ndimage.generate_binary_structure(3, 1)
    # edge padding keeps foreground touching the border from eroding away
    padded = np.pad(foreground, 1, mode="edge")
    closed = ndimage.binary_closing(padded, structure=structure, iterations=1)[
        1:-1, 1:-1, 1:-1
    ]
    labels, count = ndimage.label(closed, structure=structure)
    if count == 0:
        largest = closed
    else:
        sizes = np.bincount(labels.ravel())[1:]
        largest = labels == (int(np.argmax(sizes)) + 1)
    return MaskVolume(largest[np.newaxis].astype(np.uint8), vol.spacing_mm, vol.origin_mm)


def apply_mask(vol: Volume, mask: MaskVolume) -> Volume:
    if vol.dims != mask.dims:
        raise GridMismatchError(f"Mask dims {mask.dims} do not match volume {vol.dims}")
    return vol.like(vol.data * mask.data.astype(vol.data.dtype))


def preprocess(
    vol: Volume,
    spacing_mm: float,
    size: Sequence[int],
    center_voxel: Optional[Sequence[int]] = None,
) -> Volume:
    """Resample, normalize to [0, 1] and crop to a fixed size."""
    resampled = normalize_intensity(resample_isotropic(vol, spacing_mm))
    if center_voxel is None:
        center_voxel = [d // 2 for d in resampled.dims]
    return crop_centered(resampled, center_voxel, size)
