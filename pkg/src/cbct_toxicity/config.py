import argparse
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Tuple

from cbct_toxicity.common import (
    CLINICAL_BRANCH,
    DEFAULT_CROP_SIZE,
    DEFAULT_SPACING_MM,
    JACOBIAN_BRANCH,
    JACOBIAN_DETERMINANT,
    JACOBIAN_MATRIX,
    MAX_FRACTION,
    MODALITY_STAGE,
    NG_TUBE,
    STAGES,
    TOXICITIES,
    parse_combination,
)

OUTPUT_ROOT_VAR_NAME = "CBCT_TOXICITY_OUTPUT_ROOT"
RUN_CONFIG_FILE = "run_config.json"

REG_ENGINES = ("unet", "direct")
JACOBIAN_MODES = (JACOBIAN_MATRIX, JACOBIAN_DETERMINANT)
JACOBIAN_SOURCES = ("truth", "registered")
TIME_PROFILES = ("linear", "constant")
RESNET_VARIANTS = (34, 50)

COMMANDS = (
    "phantom",
    "cohort",
    "preprocess",
    "reg-rigid",
    "reg-train",
    "reg-apply",
    "jacobian",
    "tox-train",
    "ablate",
    "evolve",
    "gradcheck",
)


@dataclass
class RunConfig:
    seed: int = 0
    grid: int = 32
    spacing_mm: float = DEFAULT_SPACING_MM
    crop_size: int = DEFAULT_CROP_SIZE
    center: Optional[Tuple[int, int, int]] = None
    mask: bool = False

    lambda_modality: float = 1.0
    lambda_anatomy: float = 0.5
    reg_engine: str = "direct"
    reg_epochs: int = 100
    reg_batch: int = 7
    reg_lr: float = 1e-3
    reg_patience: int = 10
    unet_encoder: Tuple[int, ...] = (16, 32, 32, 32)
    unet_decoder: Tuple[int, ...] = (32, 32, 32, 32, 32, 16, 16)
    direct_iters: int = 150
    direct_levels: int = 3
    rigid_levels: int = 4
    rigid_iters: int = 100
    compose_reversed: bool = False
    stage: str = MODALITY_STAGE

    tox_epochs: int = 100
    tox_batch: int = 8
    tox_lr: float = 7e-4
    resnet_variant: int = 34
    resnet_width: int = 8
    jacobian_mode: str = JACOBIAN_MATRIX
    jacobian_source: str = "truth"
    branches: Tuple[str, ...] = (CLINICAL_BRANCH, JACOBIAN_BRANCH)
    combinations: Tuple[Tuple[str, ...], ...] = (
        (CLINICAL_BRANCH,),
        (JACOBIAN_BRANCH,),
        (CLINICAL_BRANCH, JACOBIAN_BRANCH),
    )

    fractions: Tuple[int, ...] = (5, 10, 15, 20, 25, 30)
    study_fraction: int = 10
    folds: int = 5
    n_patients: int = 40
    deformation_mm: float = 8.0
    strength: float = 4.0
    base_rate: float = 0.3
    time_profile: str = "linear"
    target: str = NG_TUBE

    input: Optional[str] = None
    fixed: Optional[str] = None
    moving: Optional[str] = None
    model_a: Optional[str] = None
    model_b: Optional[str] = None
    output: Optional[str] = None
    threads: int = 1
    debug: bool = False
    plot: bool = False

    def validate(self) -> "RunConfig":
        choices = {
            "reg_engine": REG_ENGINES,
            "jacobian_mode": JACOBIAN_MODES,
            "jacobian_source": JACOBIAN_SOURCES,
            "time_profile": TIME_PROFILES,
            "resnet_variant": RESNET_VARIANTS,
            "target": TOXICITIES,
            "stage": STAGES,
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"Unsupported {name} `{getattr(self, name)}`, expected {allowed}")
        for name in ("grid", "crop_size", "reg_epochs", "reg_batch", "tox_epochs", "tox_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.threads < 1:
            raise ValueError(f"threads must be positive, got {self.threads}")
        if self.spacing_mm <= 0:
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if self.lambda_modality < 0 or self.lambda_anatomy < 0:
            raise ValueError("lambda values must be >= 0")
        if not 0.0 < self.base_rate < 1.0:
            raise ValueError(f"base_rate must be in (0, 1), got {self.base_rate}")
        if self.deformation_mm < 0:
            raise ValueError(f"deformation_mm must be >= 0, got {self.deformation_mm}")
        for t in self.fractions + (self.study_fraction,):
            if not 1 <= t <= MAX_FRACTION:
                raise ValueError(f"Fraction {t} outside 1..{MAX_FRACTION}")
        for combination in self.combinations + (self.branches,):
            parse_combination("+".join(combination))
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {name.replace("_", "-"): _jsonable(value) for name, value in asdict(self).items()}

    def merged(self, overrides: Dict[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(self)}
        unknown = [k for k in overrides if k not in known]
        if unknown:
            raise ValueError(f"Unknown config keys: {unknown}")
        values = asdict(self)
        values.update(overrides)
        return _normalized(RunConfig(**values))


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _normalized(config: RunConfig) -> RunConfig:
    config.branches = tuple(config.branches)
    config.combinations = tuple(tuple(c) for c in config.combinations)
    config.fractions = tuple(int(t) for t in config.fractions)
    config.unet_encoder = tuple(int(c) for c in config.unet_encoder)
    config.unet_decoder = tuple(int(c) for c in config.unet_decoder)
    if config.center is not None:
        config.center = tuple(int(c) for c in config.center)
    return config


def parse_json_to_run_config(json_data: str, base: Optional[RunConfig] = None) -> RunConfig:
    data = json.loads(json_data)
    if not isinstance(data, dict):
        raise ValueError("Config file must hold a JSON object")
    overrides = {key.replace("-", "_"): value for key, value in data.items()}
    return (base or RunConfig()).merged(overrides)


def parse_config(file_path: str, base: Optional[RunConfig] = None) -> RunConfig:
    with open(file_path, "r") as file:
        return parse_json_to_run_config(file.read(), base)


def write_run_config(config: RunConfig, directory: Path):
    with open(directory / RUN_CONFIG_FILE, "w", encoding="utf-8") as f:
        json.dump(config.to_dict(), f, indent=2)
        f.write("\n")


def default_output(command: str) -> str:
    root = os.environ.get(OUTPUT_ROOT_VAR_NAME, "./runs")
    return str(Path(root) / command)


def _int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in text.split(",") if part.strip())


def _int_triple(text: str) -> Tuple[int, ...]:
    values = _int_list(text)
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"Expected x,y,z, got `{text}`")
    return values


def _branch_list(text: str) -> Tuple[str, ...]:
    return parse_combination(text.replace(",", "+"))


def _combination_list(text: str) -> Tuple[Tuple[str, ...], ...]:
    return tuple(parse_combination(part) for part in text.split(";") if part.strip())


def _add(parser: argparse.ArgumentParser, flag: str, **kwargs):
    parser.add_argument(flag, default=argparse.SUPPRESS, **kwargs)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add(common, "--config", dest="config_path", help="Path to a JSON RunConfig file")
    _add(common, "--output", help="Output directory")
    _add(common, "--seed", type=int, help="Random seed")
    _add(common, "--threads", type=int, help="Worker threads for studies")
    _add(common, "--debug", action=argparse.BooleanOptionalAction, help="Debug logging")
    _add(common, "--plot", action=argparse.BooleanOptionalAction, help="Also render figures")
    return common


def _add_cohort_flags(parser: argparse.ArgumentParser):
    _add(parser, "--grid", type=int, help="Cubic grid size in voxels")
    _add(parser, "--spacing-mm", type=float, help="Voxel spacing in mm")
    _add(parser, "--deformation-mm", type=float, help="Maximum deformation in mm")
    _add(parser, "--fractions", type=_int_list, help="Fractions, separated by `,`")


def _add_classifier_flags(parser: argparse.ArgumentParser):
    _add(parser, "--input", help="Cohort directory (generated from the config if omitted)")
    _add(parser, "--tox-epochs", type=int, help="Classifier epochs")
    _add(parser, "--tox-batch", type=int, help="Classifier batch size")
    _add(parser, "--tox-lr", type=float, help="Classifier peak learning rate")
    _add(parser, "--resnet-variant", type=int, choices=RESNET_VARIANTS, help="ResNet depth")
    _add(parser, "--resnet-width", type=int, help="ResNet base width (64 canonical)")
    _add(parser, "--jacobian-mode", choices=JACOBIAN_MODES, help="Jacobian branch input")
    _add(parser, "--jacobian-source", choices=JACOBIAN_SOURCES, help="Where Jacobians come from")
    _add(parser, "--target", choices=TOXICITIES, help="Toxicity to predict")
    _add(parser, "--folds", type=int, help="Cross-validation folds")
    _add_cohort_flags(parser)
    _add(parser, "--n-patients", type=int, help="Synthetic cohort size")
    _add(parser, "--strength", type=float, help="Synthetic effect strength")
    _add(parser, "--base-rate", type=float, help="Synthetic label prevalence")
    _add(parser, "--time-profile", choices=TIME_PROFILES, help="Synthetic effect over time")


def _add_registration_flags(parser: argparse.ArgumentParser):
    _add(parser, "--engine", dest="reg_engine", choices=REG_ENGINES, help="DIR engine")
    _add(parser, "--lambda-modality", type=float, help="Penalty weight, modality stage")
    _add(parser, "--lambda-anatomy", type=float, help="Penalty weight, anatomy stage")
    _add(parser, "--direct-iters", type=int, help="Iterations per level (direct engine)")
    _add(parser, "--direct-levels", type=int, help="Pyramid levels (direct engine)")


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="cbct_toxicity",
        description="Predict radiotherapy toxicity from pCT/CBCT deformation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", parents=[common], help="Generate a synthetic phantom")
    _add_cohort_flags(phantom)

    cohort = sub.add_parser("cohort", parents=[common], help="Generate a synthetic cohort")
    _add_cohort_flags(cohort)
    _add(cohort, "--n-patients", type=int, help="Number of patients")
    _add(cohort, "--strength", type=float, help="Effect strength")
    _add(cohort, "--base-rate", type=float, help="Target label prevalence")
    _add(cohort, "--target", choices=TOXICITIES, help="Toxicity driven by deformation")
    _add(cohort, "--time-profile", choices=TIME_PROFILES, help="Effect growth over fractions")

    preprocess = sub.add_parser("preprocess", parents=[common], help="Resample, normalize, crop")
    _add(preprocess, "--input", required=True, help="Input v3j header")
    _add(preprocess, "--spacing-mm", type=float, help="Target isotropic spacing")
    _add(preprocess, "--crop-size", type=int, help="Cubic crop size in voxels")
    _add(preprocess, "--center", type=_int_triple, help="Crop center voxel x,y,z")
    _add(preprocess, "--mask", action=argparse.BooleanOptionalAction, help="Also write a mask")

    rigid = sub.add_parser("reg-rigid", parents=[common], help="Rigid registration")
    _add(rigid, "--fixed", required=True, help="Fixed v3j header")
    _add(rigid, "--moving", required=True, help="Moving v3j header")
    _add(rigid, "--levels", dest="rigid_levels", type=int, help="Pyramid levels")
    _add(rigid, "--iters", dest="rigid_iters", type=int, help="Iterations per level")

    train = sub.add_parser("reg-train", parents=[common], help="Train a DIR model")
    _add(train, "--input", required=True, help="Phantom or cohort directory")
    _add(train, "--stage", choices=STAGES, help="Registration stage")
    _add(train, "--epochs", dest="reg_epochs", type=int, help="Training epochs")
    _add(train, "--batch", dest="reg_batch", type=int, help="Batch size")
    _add(train, "--lr", dest="reg_lr", type=float, help="Peak learning rate")
    _add(train, "--patience", dest="reg_patience", type=int, help="Early stopping patience")
    _add(train, "--lambda-modality", type=float, help="Penalty weight, modality stage")
    _add(train, "--lambda-anatomy", type=float, help="Penalty weight, anatomy stage")
    _add(train, "--unet-encoder", type=_int_list, help="Encoder widths, separated by `,`")
    _add(train, "--unet-decoder", type=_int_list, help="Decoder widths, separated by `,`")

    apply = sub.add_parser("reg-apply", parents=[common], help="Two-stage registration")
    _add(apply, "--input", required=True, help="Phantom directory")
    _add(apply, "--fraction", dest="study_fraction", type=int, help="CBCT fraction")
    _add(apply, "--model-a", help="Modality-stage checkpoint (unet engine)")
    _add(apply, "--model-b", help="Anatomy-stage checkpoint (unet engine)")
    _add(apply, "--compose-reversed", action=argparse.BooleanOptionalAction, help="Swap order")
    _add_registration_flags(apply)

    jacobian = sub.add_parser("jacobian", parents=[common], help="Jacobian of a DVF")
    _add(jacobian, "--input", required=True, help="3-channel v3j displacement field")
    _add(jacobian, "--mode", dest="jacobian_mode", choices=JACOBIAN_MODES, help="Output kind")

    tox = sub.add_parser("tox-train", parents=[common], help="Train one classifier")
    _add_classifier_flags(tox)
    _add(tox, "--branches", type=_branch_list, help="Branches, e.g. clinical,jacobian")
    _add(tox, "--fraction", dest="study_fraction", type=int, help="CBCT fraction")

    ablate = sub.add_parser("ablate", parents=[common], help="Branch ablation study")
    _add_classifier_flags(ablate)
    _add(ablate, "--combinations", type=_combination_list, help="e.g. clinical;clinical+jacobian")
    _add(ablate, "--fraction", dest="study_fraction", type=int, help="CBCT fraction")

    evolve = sub.add_parser("evolve", parents=[common], help="Risk evolution over fractions")
    _add_classifier_flags(evolve)

    sub.add_parser("gradcheck", parents=[common], help="Gradient verification suite")
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Dataclass defaults, then the ``--config`` file, then explicit flags."""
    config = RunConfig()
    values: Dict[str, Any] = dict(vars(args))
    config_path = values.pop("config_path", None)
    command = values.pop("command")
    if config_path:
        config = parse_config(config_path, config)
    config = config.merged(values)
    if config.output is None:
        config.output = default_output(command)
    return config.validate()

