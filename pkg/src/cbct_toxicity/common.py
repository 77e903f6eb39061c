from dataclasses import dataclass

MODALITY_STAGE = "modality"
ANATOMY_STAGE = "anatomy"
STAGES = (MODALITY_STAGE, ANATOMY_STAGE)

NG_TUBE = "ng_tube"
HOSPITALIZATION = "hospitalization"
RADIONECROSIS = "radionecrosis"
TOXICITIES = (NG_TUBE, HOSPITALIZATION, RADIONECROSIS)

# occurrence rates in the training population, used for the non-target labels
# of synthetic cohorts
TOXICITY_RATES = {
    NG_TUBE: 0.199,
    HOSPITALIZATION: 0.072,
    RADIONECROSIS: 0.038,
}

CBCT_BRANCH = "cbct"
JACOBIAN_BRANCH = "jacobian"
CLINICAL_BRANCH = "clinical"
BRANCHES = (CBCT_BRANCH, JACOBIAN_BRANCH, CLINICAL_BRANCH)

JACOBIAN_MATRIX = "matrix"
JACOBIAN_DETERMINANT = "determinant"

DEFAULT_SPACING_MM = 2.0
DEFAULT_CROP_SIZE = 128
MAX_FRACTION = 35


@dataclass
class Columns:
    FOLD = "fold"
    COMBINATION = "combination"
    FRACTION = "fraction"
    BACC = "bAcc"
    SENSITIVITY = "sensitivity"
    SPECIFICITY = "specificity"
    BACC_MEAN = "bAcc_mean"
    BACC_STD = "bAcc_std"
    SENS_MEAN = "sensitivity_mean"
    SENS_STD = "sensitivity_std"
    SPEC_MEAN = "specificity_mean"
    SPEC_STD = "specificity_std"
    EPOCH = "epoch"
    LOSS = "loss"
    LR = "lr"
    VAL_BACC = "val_bAcc"
    VAL_SENS = "val_sens"
    VAL_SPEC = "val_spec"
    LAYER = "layer"
    MAX_REL_ERROR = "max_rel_error"
    PASSED = "passed"


def combination_name(branches) -> str:
    """Stable row label for a branch subset, e.g. ``clinical+jacobian``."""
    unknown = [b for b in branches if b not in BRANCHES]
    if unknown:
        raise ValueError(f"Unsupported branch: {unknown[0]}")
    return "+".join(b for b in (CLINICAL_BRANCH, CBCT_BRANCH, JACOBIAN_BRANCH) if b in branches)


def parse_combination(name: str):
    parts = tuple(p.strip() for p in name.split("+") if p.strip())
    combination_name(parts)
    return parts
