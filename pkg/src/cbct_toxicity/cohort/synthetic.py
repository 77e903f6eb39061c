"""Synthetic cohorts whose target toxicity is driven by regional volume change."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from cbct_toxicity.cohort.phantom import (
    DEFAULT_FRACTIONS,
    Grid,
    centered_coordinates,
    grid_dims,
    simulate_cbct_appearance,
    smooth_bump_field,
    synth_anatomy,
)
from cbct_toxicity.cohort.records import (
    ALCOHOL_STATUSES,
    M_STAGES,
    N_STAGES,
    P16_STATUSES,
    SEXES,
    SMOKER_STATUSES,
    T_STAGES,
    TUMOR_LOCATIONS,
    PatientRecord,
    read_manifest,
    write_manifest,
)
from cbct_toxicity.common import DEFAULT_SPACING_MM, NG_TUBE, TOXICITIES, TOXICITY_RATES
from cbct_toxicity.field import DisplacementField, jacobian_determinant, jacobian_field, warp
from cbct_toxicity.volio import MaskVolume, Volume, read_mask, read_volume, write_mask, write_volume

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.json"
ORACLE_FILE = "oracle.csv"
MIN_PATIENTS = 10
SIGNAL_SHARE = 0.75
LINEAR_PROFILE = "linear"
CONSTANT_PROFILE = "constant"


class DegenerateCohortError(ValueError):
    pass


@dataclass(frozen=True)
class EffectConfig:
    """How the target label depends on deformation.

    ``region_center`` is a fraction of the grid extent relative to its center and
    ``region_radius`` a fraction of the smallest extent.
    """

    target: str = NG_TUBE
    strength: float = 4.0
    base_rate: float = 0.3
    time_profile: str = LINEAR_PROFILE
    region_center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    region_radius: float = 0.18

    def __post_init__(self):
        if self.target not in TOXICITIES:
            raise ValueError(f"Unsupported target `{self.target}`")
        if self.time_profile not in (LINEAR_PROFILE, CONSTANT_PROFILE):
            raise ValueError(f"Unsupported time profile `{self.time_profile}`")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError(f"base_rate must be in (0, 1), got {self.base_rate}")
        if self.strength < 0:
            raise ValueError(f"strength must be >= 0, got {self.strength}")

    def profile(self, t: int, last: int) -> float:
        if t <= 0:
            return 0.0
        return t / last if self.time_profile == LINEAR_PROFILE else 1.0


@dataclass
class SyntheticPatient:
    record: PatientRecord
    pct: Volume
    cbct: Dict[int, Volume]
    dvf: Dict[int, DisplacementField]
    regional_change: float
    probability: float


@dataclass
class SyntheticCohort:
    patients: List[SyntheticPatient]
    effect: EffectConfig
    mask: MaskVolume
    region: MaskVolume
    fractions: List[int] = field(default_factory=list)

    @property
    def records(self) -> List[PatientRecord]:
        return [p.record for p in self.patients]

    def labels(self, target: str = "") -> np.ndarray:
        target = target or self.effect.target
        return np.array([int(p.record.labels[target]) for p in self.patients], dtype=np.int64)

    def probabilities(self) -> np.ndarray:
        return np.array([p.probability for p in self.patients])


def region_mask(like: Volume, center: Sequence[float], radius: float) -> MaskVolume:
    coords = centered_coordinates(like.shape_zyx, like.spacing_mm[0])
    extent = np.array(like.dims, dtype=np.float64) * like.spacing_mm[0]
    c = (np.asarray(center, dtype=np.float64) * extent).reshape(3, 1, 1, 1)
    r = radius * float(extent.min())
    inside = ((coords - c) ** 2).sum(axis=0) <= r**2
    return MaskVolume(inside[np.newaxis].astype(np.uint8), like.spacing_mm, like.origin_mm)


def radial_field(like: Volume, region: MaskVolume, peak_mm: float, radius: float) -> np.ndarray:
    """Expansion (``peak_mm`` > 0) or shrinkage centred on ``region``.

    ``|u|`` peaks at ``peak_mm`` on a sphere of radius sigma around the region center.
    """
    coords = centered_coordinates(like.shape_zyx, like.spacing_mm[0])
    weights = region.data[0].astype(np.float64)
    center = (coords * weights).sum(axis=(1, 2, 3)) / max(weights.sum(), 1.0)
    sigma = radius * float(np.array(like.dims).min()) * like.spacing_mm[0]
    offset = coords - center.reshape(3, 1, 1, 1)
    gain = peak_mm / (sigma * math.exp(-0.5))
    return gain * offset * np.exp(-(offset**2).sum(axis=0) / (2.0 * sigma**2))


def regional_volume_change(dvf: Volume, region: MaskVolume) -> float:
    """Mean of ``det J - 1`` over ``region``."""
    det = jacobian_determinant(jacobian_field(dvf)).data[0]
    inside = region.data[0].astype(bool)
    if not inside.any():
        raise ValueError("Region mask is empty")
    return float((det[inside] - 1.0).mean())


def label_probability(z_scores: np.ndarray, strength: float, base_rate: float) -> np.ndarray:
    """``sigmoid(strength * z + logit(base_rate))``."""
    logit = math.log(base_rate / (1.0 - base_rate))
    return 1.0 / (1.0 + np.exp(-(strength * np.asarray(z_scores, dtype=np.float64) + logit)))


def bayes_decisions(probabilities: np.ndarray, prevalence: float) -> np.ndarray:
    """Balanced-accuracy optimal decisions for calibrated probabilities."""
    return (np.asarray(probabilities) >= prevalence).astype(np.int64)


def _z_scores(values: np.ndarray) -> np.ndarray:
    std = values.std()
    return np.zeros_like(values) if std == 0 else (values - values.mean()) / std


def _clinical_record(rng: np.random.Generator, patient_id: str) -> PatientRecord:
    return PatientRecord(
        id=patient_id,
        age_years=float(np.clip(rng.normal(62.0, 9.0), 25.0, 95.0)),
        sex=str(rng.choice(SEXES, p=[0.75, 0.25])),
        kps=float(rng.choice([60, 70, 80, 90, 100])),
        tumor_location=str(rng.choice(TUMOR_LOCATIONS)),
        smoker=str(rng.choice(SMOKER_STATUSES)),
        alcohol=str(rng.choice(ALCOHOL_STATUSES)),
        t_stage=str(rng.choice(T_STAGES)),
        n_stage=str(rng.choice(N_STAGES)),
        m_stage=str(rng.choice(M_STAGES, p=[0.9, 0.05, 0.05])),
        p16=str(rng.choice(P16_STATUSES)),
        surgery=bool(rng.random() < 0.3),
        chemo=bool(rng.random() < 0.6),
    )


def synth_cohort(
    n: int,
    seed: int,
    effect: EffectConfig,
    fractions: Sequence[int] = DEFAULT_FRACTIONS,
    grid: Grid = 32,
    spacing_mm: float = DEFAULT_SPACING_MM,
    deformation_mm: float = 8.0,
) -> SyntheticCohort:
    """``n`` phantoms whose target label follows the regional volume change of the anatomy.

    Each CBCT field is ``profile(t) * signal + nuisance``: the signal is a radial
    field in the effect region and the nuisance a label-independent bump field
    redrawn per fraction. Labels follow the full-scale signal only.
    """
    if n < MIN_PATIENTS:
        raise ValueError(f"A cohort needs at least {MIN_PATIENTS} patients, got {n}")
    series = sorted({0, *(int(t) for t in fractions)})
    last = max(series[-1], 1)
    shape_zyx = grid_dims(grid)[::-1]
    spacing = (spacing_mm,) * 3
    origin = tuple(-(k - 1) / 2.0 * spacing_mm for k in shape_zyx[::-1])
    reference = Volume(np.zeros((1,) + tuple(shape_zyx), dtype=np.float32), spacing, origin)
    region = region_mask(reference, effect.region_center, effect.region_radius)
    head_mask = np.zeros(shape_zyx, dtype=bool)

    root = np.random.default_rng(seed)
    amplitude_rng, label_rng, *patient_rngs = root.spawn(n + 2)
    amplitudes = np.clip(amplitude_rng.standard_normal(n), -2.0, 2.0) / 2.0

    signals, changes, staged = [], [], []
    for index, rng in enumerate(patient_rngs):
        anatomy_rng, clinical_rng, nuisance_rng, appearance_rng = rng.spawn(4)
        image, labels = synth_anatomy(anatomy_rng, shape_zyx, spacing_mm)
        head_mask |= labels > 0
        pct = Volume(image[np.newaxis].astype(np.float32), spacing, origin)
        peak_mm = amplitudes[index] * SIGNAL_SHARE * deformation_mm
        signal = radial_field(reference, region, peak_mm, effect.region_radius)
        full = DisplacementField(signal, spacing, origin)
        changes.append(regional_volume_change(full, region))
        signals.append(signal)
        record = _clinical_record(clinical_rng, f"P{index:03d}")
        staged.append((record, pct, labels, nuisance_rng, appearance_rng))

    z_scores = _z_scores(np.array(changes))
    probabilities = label_probability(z_scores, effect.strength, effect.base_rate)
    target_labels = label_rng.random(n) < probabilities
    if target_labels.all() or not target_labels.any():
        raise DegenerateCohortError(
            f"Cohort of {n} drew a single class for `{effect.target}`; change seed or base rate"
        )

    patients = []
    for index, (record, pct, labels, nuisance_rng, appearance_rng) in enumerate(staged):
        record.labels = {
            name: bool(label_rng.random() < TOXICITY_RATES[name]) for name in TOXICITIES
        }
        record.labels[effect.target] = bool(target_labels[index])
        cbct, dvfs = {}, {}
        appearance_rngs = appearance_rng.spawn(len(series))
        for t, draw in zip(series, appearance_rngs):
            u = signals[index] * effect.profile(t, last)
            if t > 0:
                nuisance = smooth_bump_field(nuisance_rng, shape_zyx, spacing_mm, labels > 0)
                u = u + nuisance * (1.0 - SIGNAL_SHARE) * deformation_mm
            dvfs[t] = DisplacementField(u.astype(np.float32), spacing, origin)
            cbct[t] = simulate_cbct_appearance(warp(pct, dvfs[t]), draw)
        record.cbct_paths = [(t, "") for t in series]
        patients.append(
            SyntheticPatient(record, pct, cbct, dvfs, changes[index], float(probabilities[index]))
        )

    mask = MaskVolume(head_mask[np.newaxis].astype(np.uint8), spacing, origin)
    cohort = SyntheticCohort(patients, effect, mask, region, series)
    logger.info(
        f"Synthetic cohort: {n} patients, {int(target_labels.sum())} positive for "
        f"`{effect.target}`, strength {effect.strength}, profile {effect.time_profile}"
    )
    return cohort


def _patient_paths(patient_id: str, t: int) -> Tuple[str, str]:
    return f"{patient_id}/cbct_t{t:02d}.v3j", f"{patient_id}/dvf_t{t:02d}.v3j"


def write_cohort(cohort: SyntheticCohort, directory: Union[str, Path]):
    """Volumes as v3j, the manifest with relative paths and the label oracle as CSV."""
    directory = Path(directory)
    rows = []
    for patient in cohort.patients:
        record = patient.record
        (directory / record.id).mkdir(parents=True, exist_ok=True)
        record.pct_path = f"{record.id}/pct.v3j"
        write_volume(patient.pct, directory / record.pct_path)
        paths = []
        for t in cohort.fractions:
            cbct_path, dvf_path = _patient_paths(record.id, t)
            write_volume(patient.cbct[t], directory / cbct_path)
            write_volume(patient.dvf[t], directory / dvf_path)
            paths.append((t, cbct_path))
        record.cbct_paths = paths
        rows.append(
            {
                "id": record.id,
                "regional_change": patient.regional_change,
                "probability": patient.probability,
                "label": int(record.labels[cohort.effect.target]),
            }
        )
    write_mask(cohort.mask, directory / "mask.v3j")
    write_mask(cohort.region, directory / "region.v3j")
    write_manifest(cohort.records, directory / MANIFEST_FILE)
    pd.DataFrame(rows).to_csv(directory / ORACLE_FILE, index=False)


def read_cohort(directory: Union[str, Path], effect: EffectConfig) -> SyntheticCohort:
    directory = Path(directory)
    records = read_manifest(directory / MANIFEST_FILE)
    oracle = pd.read_csv(directory / ORACLE_FILE, dtype={"id": str}).set_index("id")
    patients = []
    fractions: List[int] = []
    for record in records:
        if record.pct_path is None:
            raise ValueError(f"Record {record.id} has no pCT path")
        cbct, dvfs = {}, {}
        for t, path in record.cbct_paths:
            cbct[t] = read_volume(directory / path)
            dvfs[t] = DisplacementField.from_volume(
                read_volume(directory / _patient_paths(record.id, t)[1])
            )
        fractions = fractions or record.fractions
        patients.append(
            SyntheticPatient(
                record,
                read_volume(directory / record.pct_path),
                cbct,
                dvfs,
                float(oracle.loc[record.id, "regional_change"]),
                float(oracle.loc[record.id, "probability"]),
            )
        )
    return SyntheticCohort(
        patients,
        effect,
        read_mask(directory / "mask.v3j"),
        read_mask(directory / "region.v3j"),
        fractions,
    )
