"""Patient records, the one-hot clinical encoding, manifests and landmarks."""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from cbct_toxicity.common import MAX_FRACTION, TOXICITIES

logger = logging.getLogger(__name__)

SEXES = ("M", "F")
TUMOR_LOCATIONS = (
    "oropharynx",
    "larynx",
    "nasopharynx",
    "hypopharynx",
    "oral cavity",
    "unknown primary",
)
SMOKER_STATUSES = ("never", "former", "current")
ALCOHOL_STATUSES = ("no", "yes")
T_STAGES = ("T1", "T2", "T3", "T4", "Tx")
N_STAGES = ("N0", "N1", "N2", "N3", "Nx")
M_STAGES = ("M0", "M1", "Mx")
P16_STATUSES = ("pos", "neg", "unknown")
FLAG_VALUES = ("no", "yes")

# (block name, categories); None marks a scaled scalar
CLINICAL_SCHEMA: Tuple[Tuple[str, Optional[Tuple[str, ...]]], ...] = (
    ("age", None),
    ("sex", SEXES),
    ("kps", None),
    ("tumor_location", TUMOR_LOCATIONS),
    ("smoker", SMOKER_STATUSES),
    ("alcohol", ALCOHOL_STATUSES),
    ("t_stage", T_STAGES),
    ("n_stage", N_STAGES),
    ("m_stage", M_STAGES),
    ("p16", P16_STATUSES),
    ("surgery", FLAG_VALUES),
    ("chemo", FLAG_VALUES),
)
CLINICAL_WIDTH = sum(1 if cats is None else len(cats) for _, cats in CLINICAL_SCHEMA)

COORDINATE_COLUMNS = ["fixed_x", "fixed_y", "fixed_z", "moving_x", "moving_y", "moving_z"]
LANDMARK_COLUMNS = ["id", *COORDINATE_COLUMNS, "millimeters"]
DISTANCE_TOLERANCE_MM = 1e-3


class UnknownCategoryError(ValueError):
    pass


@dataclass
class PatientRecord:
    id: str
    age_years: float
    sex: str
    kps: float
    tumor_location: str
    smoker: str
    alcohol: str
    t_stage: str
    n_stage: str
    m_stage: str
    p16: str
    surgery: bool
    chemo: bool
    feeding_tube_at_onset: bool = False
    labels: Dict[str, bool] = field(default_factory=dict)
    pct_path: Optional[str] = None
    cbct_paths: List[Tuple[int, str]] = field(default_factory=list)
    landmarks_path: Optional[str] = None

    def __post_init__(self):
        self.cbct_paths = [(int(t), str(p)) for t, p in self.cbct_paths]
        fractions = self.fractions
        if any(b <= a for a, b in zip(fractions, fractions[1:])):
            raise ValueError(f"Fractions of {self.id} must be strictly increasing: {fractions}")
        # fraction 0 is the baseline CBCT acquired at the first session
        if fractions and not 0 <= fractions[0] <= fractions[-1] <= MAX_FRACTION:
            raise ValueError(f"Fractions of {self.id} must lie within 0..{MAX_FRACTION}")
        missing = [name for name in TOXICITIES if name not in self.labels]
        if self.labels and missing:
            raise ValueError(f"Record {self.id} lacks labels {missing}")
        self.labels = {name: bool(value) for name, value in self.labels.items()}

    @property
    def fractions(self) -> List[int]:
        return [t for t, _ in self.cbct_paths]

    def cbct_path(self, fraction: int) -> str:
        for t, path in self.cbct_paths:
            if t == fraction:
                return path
        raise KeyError(f"Record {self.id} has no CBCT at fraction {fraction}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["cbct_paths"] = [[t, p] for t, p in self.cbct_paths]
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PatientRecord":
        return cls(**data)


@dataclass(frozen=True)
class ClinicalVector:
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (CLINICAL_WIDTH,):
            raise ValueError(
                f"Clinical vector must have width {CLINICAL_WIDTH}, got {values.shape}"
            )
        object.__setattr__(self, "values", values)

    def block(self, name: str) -> np.ndarray:
        start = 0
        for block_name, categories in CLINICAL_SCHEMA:
            width = 1 if categories is None else len(categories)
            if block_name == name:
                return self.values[start : start + width]
            start += width
        raise KeyError(f"Unknown clinical block `{name}`")


def _one_hot(name: str, value: str, categories: Tuple[str, ...]) -> List[float]:
    if value not in categories:
        raise UnknownCategoryError(f"Unsupported {name} `{value}`, expected one of {categories}")
    return [1.0 if value == category else 0.0 for category in categories]


def _scaled(name: str, value: float) -> List[float]:
    if not 0.0 <= value <= 100.0:
        raise ValueError(f"{name} must lie within 0..100, got {value}")
    return [value / 100.0]


def encode_clinical(rec: PatientRecord) -> ClinicalVector:
    values: List[float] = []
    for name, categories in CLINICAL_SCHEMA:
        if name == "age":
            values += _scaled(name, rec.age_years)
        elif name == "kps":
            values += _scaled(name, rec.kps)
        elif name in ("surgery", "chemo"):
            values += _one_hot(name, FLAG_VALUES[int(bool(getattr(rec, name)))], FLAG_VALUES)
        else:
            values += _one_hot(name, getattr(rec, name), categories)
    return ClinicalVector(np.array(values))


def exclusion_filter(records: Sequence[PatientRecord]) -> List[PatientRecord]:
    """Drop patients that already needed a feeding tube when therapy started."""
    kept = [rec for rec in records if not rec.feeding_tube_at_onset]
    if len(kept) < len(records):
        logger.info(f"Excluded {len(records) - len(kept)} of {len(records)} records")
    return kept


def write_manifest(records: Sequence[PatientRecord], path: Union[str, Path]):
    with open(path, "w", encoding="utf-8") as f:
        json.dump([rec.to_dict() for rec in records], f, indent=2)
        f.write("\n")


def read_manifest(path: Union[str, Path]) -> List[PatientRecord]:
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise ValueError(f"Manifest {path} must hold a JSON array of records")
    return [PatientRecord.from_dict(entry) for entry in data]


@dataclass(frozen=True)
class Landmark:
    id: str
    fixed_mm: Tuple[float, float, float]
    moving_mm: Tuple[float, float, float]

    @property
    def millimeters(self) -> float:
        """Distance between the fixed and moving positions."""
        return float(np.linalg.norm(np.subtract(self.moving_mm, self.fixed_mm)))


def write_landmarks(landmarks: Sequence[Landmark], path: Union[str, Path]):
    rows = [[lm.id, *lm.fixed_mm, *lm.moving_mm, lm.millimeters] for lm in landmarks]
    pd.DataFrame(rows, columns=LANDMARK_COLUMNS).to_csv(path, index=False)


def read_landmarks(path: Union[str, Path]) -> List[Landmark]:
    """Landmark pairs; a ``millimeters`` column, when present, must match the pair distance."""
    frame = pd.read_csv(path, dtype={"id": str})
    missing = [c for c in ["id", *COORDINATE_COLUMNS] if c not in frame.columns]
    if missing:
        raise ValueError(f"Landmark file {path} lacks columns {missing}")
    landmarks = [
        Landmark(
            row.id,
            (float(row.fixed_x), float(row.fixed_y), float(row.fixed_z)),
            (float(row.moving_x), float(row.moving_y), float(row.moving_z)),
        )
        for row in frame.itertuples(index=False)
    ]
    if "millimeters" in frame.columns:
        for lm, reported in zip(landmarks, frame["millimeters"]):
            if abs(lm.millimeters - float(reported)) > DISTANCE_TOLERANCE_MM:
                raise ValueError(
                    f"Landmark {lm.id} in {path} reports {reported} mm, "
                    f"its positions are {lm.millimeters:.4f} mm apart"
                )
    return landmarks
