"""Synthetic head phantoms with known deformations and landmarks."""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from cbct_toxicity.cohort.records import Landmark, read_landmarks, write_landmarks
from cbct_toxicity.common import DEFAULT_SPACING_MM
from cbct_toxicity.field import DisplacementField, warp
from cbct_toxicity.interpolation import identity_grid
from cbct_toxicity.volio import MaskVolume, Volume, read_mask, read_volume, write_mask, write_volume

logger = logging.getLogger(__name__)

DEFAULT_FRACTIONS = (5, 10, 15, 20, 25, 30)
CBCT_NOISE_SIGMA = 0.02
CBCT_SHIFT_RANGE = 0.05
CBCT_BIAS_AMPLITUDE = 0.1
SOFT_TISSUE = 0.45
N_STRUCTURES = 5
N_BUMPS = 4
N_LANDMARKS = 5
PHANTOM_FILE = "phantom.json"

Grid = Union[int, Sequence[int]]


@dataclass
class PhantomCase:
    """A pCT with a CBCT per fraction; ``cbct[t]`` is ``pct`` deformed by ``dvf[t]``.

    Fields are pull-back displacements on the CBCT grid, so the fixed point ``x``
    of fraction ``t`` corresponds to ``x + dvf[t](x)`` in the pCT.
    """

    pct: Volume
    mask: MaskVolume
    structures: Volume
    cbct: Dict[int, Volume] = field(default_factory=dict)
    dvf: Dict[int, DisplacementField] = field(default_factory=dict)
    landmarks: Dict[int, List[Landmark]] = field(default_factory=dict)
    seed: int = 0
    deformation_mm: float = 0.0

    @property
    def fractions(self) -> List[int]:
        return sorted(self.cbct)


def grid_dims(grid: Grid) -> Tuple[int, int, int]:
    if isinstance(grid, (int, np.integer)):
        dims = (int(grid),) * 3
    else:
        dims = tuple(int(n) for n in grid)
    if len(dims) != 3 or min(dims) < 8:
        raise ValueError(f"Phantom grid needs 3 dims of at least 8 voxels, got {grid}")
    return dims  # type: ignore[return-value]


def centered_coordinates(shape_zyx: Tuple[int, int, int], spacing_mm: float) -> np.ndarray:
    """Physical ``(3, z, y, x)`` coordinates relative to the grid center."""
    grid = identity_grid(shape_zyx)
    center = (np.array(shape_zyx[::-1], dtype=np.float64) - 1.0) / 2.0
    return (grid - center.reshape(3, 1, 1, 1)) * spacing_mm


def _ellipsoid(coords: np.ndarray, center: np.ndarray, radii: np.ndarray) -> np.ndarray:
    scaled = (coords - center.reshape(3, 1, 1, 1)) / radii.reshape(3, 1, 1, 1)
    return (scaled**2).sum(axis=0) <= 1.0


def synth_anatomy(
    rng: np.random.Generator, shape_zyx: Tuple[int, int, int], spacing_mm: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Intensity image and integer structure map (0 air, 1 soft tissue, 2+ structures)."""
    coords = centered_coordinates(shape_zyx, spacing_mm)
    extent = np.array(shape_zyx[::-1], dtype=np.float64) * spacing_mm
    head_radii = extent * np.array([0.40, 0.45, 0.42]) * rng.uniform(0.95, 1.05, 3)
    labels = _ellipsoid(coords, np.zeros(3), head_radii).astype(np.int32)

    intensities = {0: 0.0, 1: SOFT_TISSUE}
    levels = rng.permutation(np.linspace(0.1, 1.0, N_STRUCTURES))
    for index in range(N_STRUCTURES):
        radii = extent * rng.uniform(0.08, 0.16, 3)
        center = rng.uniform(-0.5, 0.5, 3) * (head_radii - radii)
        inside = _ellipsoid(coords, center, radii) & (labels == 1)
        labels[inside] = index + 2
        intensities[index + 2] = float(levels[index])

    lookup = np.array([intensities[k] for k in range(N_STRUCTURES + 2)])
    image = lookup[labels]
    texture = ndimage.gaussian_filter(rng.standard_normal(shape_zyx), sigma=1.5)
    texture /= max(float(np.abs(texture).max()), 1e-12)
    image = image + 0.03 * texture * (labels > 0)
    image = ndimage.gaussian_filter(image, sigma=0.6)
    return np.clip(image, 0.0, 1.0), labels


def smooth_bump_field(
    rng: np.random.Generator,
    shape_zyx: Tuple[int, int, int],
    spacing_mm: float,
    inside: np.ndarray,
    n_bumps: int = N_BUMPS,
) -> np.ndarray:
    """Sum of Gaussian displacement bumps centred inside ``inside``, unit max magnitude."""
    coords = centered_coordinates(shape_zyx, spacing_mm)
    extent = float(min(shape_zyx)) * spacing_mm
    candidates = np.argwhere(inside)
    out = np.zeros((3,) + tuple(shape_zyx), dtype=np.float64)
    for _ in range(n_bumps):
        z, y, x = candidates[rng.integers(len(candidates))]
        center = coords[:, z, y, x]
        sigma = extent * rng.uniform(0.12, 0.22)
        direction = rng.standard_normal(3)
        direction *= rng.uniform(0.5, 1.0) / np.linalg.norm(direction)
        distance2 = ((coords - center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0)
        out += direction.reshape(3, 1, 1, 1) * np.exp(-distance2 / (2.0 * sigma**2))
    peak = float(np.sqrt((out**2).sum(axis=0)).max())
    return out / peak if peak > 0 else out


def simulate_cbct_appearance(
    vol: Volume,
    rng: np.random.Generator,
    noise_sigma: float = CBCT_NOISE_SIGMA,
    shift_range: float = CBCT_SHIFT_RANGE,
    bias_amplitude: float = CBCT_BIAS_AMPLITUDE,
) -> Volume:
    """Global intensity shift, a smooth multiplicative bias field and Gaussian noise."""
    shape = vol.shape_zyx
    shift = rng.uniform(-shift_range, shift_range)
    bias = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(shape) / 4.0, mode="wrap")
    bias /= max(float(np.abs(bias).max()), 1e-12)
    noise = rng.normal(0.0, noise_sigma, size=shape)
    data = vol.data[0].astype(np.float64) * (1.0 + bias_amplitude * bias) + shift + noise
    return vol.like(data[np.newaxis].astype(np.float32))


def boundary_voxels(labels: np.ndarray) -> np.ndarray:
    edges = ndimage.maximum_filter(labels, size=3) != ndimage.minimum_filter(labels, size=3)
    return edges & (labels > 1)


def place_landmarks(
    rng: np.random.Generator, labels: np.ndarray, weight: np.ndarray, count: int = N_LANDMARKS
) -> np.ndarray:
    """Voxel indices ``(count, 3)`` (z, y, x) on structure boundaries.

    Candidates with large ``weight`` are preferred.
    """
    boundary = np.argwhere(boundary_voxels(labels))
    if len(boundary) < count:
        boundary = np.argwhere(labels > 0)
    scores = weight[tuple(boundary.T)]
    ranked = boundary[np.argsort(-scores, kind="stable")]
    pool = ranked[: max(count, len(ranked) // 10)]
    return pool[np.sort(rng.choice(len(pool), size=count, replace=False))]


def landmarks_for(
    pct: Volume, voxels: np.ndarray, dvf: DisplacementField
) -> List[Landmark]:
    points = []
    for index, (z, y, x) in enumerate(voxels):
        fixed = pct.voxel_to_physical(np.array([x, y, z], dtype=np.float64))
        moving = fixed + dvf.data[:, z, y, x].astype(np.float64)
        points.append(Landmark(f"L{index}", tuple(fixed.tolist()), tuple(moving.tolist())))
    return points


def synth_phantom(
    seed: int,
    deformation_mm: float,
    grid: Grid = 64,
    fractions: Sequence[int] = DEFAULT_FRACTIONS,
    spacing_mm: float = DEFAULT_SPACING_MM,
    n_landmarks: int = N_LANDMARKS,
) -> PhantomCase:
    if deformation_mm < 0:
        raise ValueError(f"deformation_mm must be >= 0, got {deformation_mm}")
    series = sorted({0, *(int(t) for t in fractions)})
    if series[0] < 0:
        raise ValueError(f"Fractions must be non-negative, got {fractions}")
    shape_zyx = grid_dims(grid)[::-1]
    anatomy_rng, field_rng, landmark_rng, appearance_rng = np.random.default_rng(seed).spawn(4)

    image, labels = synth_anatomy(anatomy_rng, shape_zyx, spacing_mm)
    origin = tuple(-(n - 1) / 2.0 * spacing_mm for n in shape_zyx[::-1])
    spacing = (spacing_mm,) * 3
    pct = Volume(image[np.newaxis].astype(np.float32), spacing, origin)
    mask = MaskVolume((labels > 0)[np.newaxis].astype(np.uint8), spacing, origin)
    structures = Volume(labels[np.newaxis].astype(np.float32), spacing, origin)

    base = smooth_bump_field(field_rng, shape_zyx, spacing_mm, labels > 0)
    magnitude = np.sqrt((base**2).sum(axis=0))
    voxels = place_landmarks(landmark_rng, labels, magnitude, n_landmarks)

    case = PhantomCase(pct, mask, structures, seed=seed, deformation_mm=float(deformation_mm))
    last = max(series[-1], 1)
    appearance_rngs = appearance_rng.spawn(len(series))
    for t, rng in zip(series, appearance_rngs):
        u = base * (deformation_mm * t / last)
        dvf = DisplacementField(u.astype(np.float32), spacing, origin)
        case.dvf[t] = dvf
        case.cbct[t] = simulate_cbct_appearance(warp(pct, dvf), rng)
        case.landmarks[t] = landmarks_for(pct, voxels, dvf)
    logger.info(
        f"Phantom seed {seed}: grid {pct.dims}, fractions {series}, "
        f"max displacement {float(case.dvf[series[-1]].magnitude().max()):.2f} mm"
    )
    return case


def _fraction_name(prefix: str, t: int, suffix: str = ".v3j") -> str:
    return f"{prefix}_t{t:02d}{suffix}"


def write_phantom(case: PhantomCase, directory: Union[str, Path]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_volume(case.pct, directory / "pct.v3j")
    write_mask(case.mask, directory / "mask.v3j")
    write_volume(case.structures, directory / "structures.v3j")
    for t in case.fractions:
        write_volume(case.cbct[t], directory / _fraction_name("cbct", t))
        write_volume(case.dvf[t], directory / _fraction_name("dvf", t))
        write_landmarks(case.landmarks[t], directory / _fraction_name("landmarks", t, ".csv"))
    meta = {"seed": case.seed, "deformation-mm": case.deformation_mm, "fractions": case.fractions}
    with open(directory / PHANTOM_FILE, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
        f.write("\n")


def read_phantom(directory: Union[str, Path]) -> PhantomCase:
    directory = Path(directory)
    meta_path = directory / PHANTOM_FILE
    if not meta_path.is_file():
        raise FileNotFoundError(f"No {PHANTOM_FILE} in {directory}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    case = PhantomCase(
        read_volume(directory / "pct.v3j"),
        read_mask(directory / "mask.v3j"),
        read_volume(directory / "structures.v3j"),
        seed=int(meta["seed"]),
        deformation_mm=float(meta["deformation-mm"]),
    )
    for t in meta["fractions"]:
        case.cbct[t] = read_volume(directory / _fraction_name("cbct", t))
        dvf = read_volume(directory / _fraction_name("dvf", t))
        case.dvf[t] = DisplacementField.from_volume(dvf)
        case.landmarks[t] = read_landmarks(directory / _fraction_name("landmarks", t, ".csv"))
    return case
