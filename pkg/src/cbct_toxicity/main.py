import asyncio
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Any, Awaitable, Callable, Dict, List, Optional, Tuple

import numpy as np

from cbct_toxicity import config as cli_config
from cbct_toxicity.cohort.phantom import PHANTOM_FILE, read_phantom, synth_phantom, write_phantom
from cbct_toxicity.cohort.synthetic import (
    EffectConfig,
    SyntheticCohort,
    read_cohort,
    synth_cohort,
    write_cohort,
)
from cbct_toxicity.common import ANATOMY_STAGE, JACOBIAN_DETERMINANT, MODALITY_STAGE, Columns
from cbct_toxicity.config import RunConfig, resolve_config, write_run_config
from cbct_toxicity.console import show_ablation, show_evolution, show_gradcheck, show_summary
from cbct_toxicity.evalx.export import (
    aggregate_frame,
    write_evolution,
    write_history,
    write_json,
    write_metrics_tables,
)
from cbct_toxicity.evalx.metrics import confusion_metrics
from cbct_toxicity.evalx.studies import (
    CrossValidation,
    ablation_study,
    assemble_dataset,
    fusion_config,
    registration_study,
    risk_evolution,
    validation_split,
)
from cbct_toxicity.field import (
    DisplacementField,
    apply_rigid,
    jacobian_determinant,
    jacobian_field,
    jacobian_summary,
)
from cbct_toxicity.gradcheck_suite import run_suite
from cbct_toxicity.nn.gradcheck import GradcheckError
from cbct_toxicity.plot import plot_ablation, plot_evolution, save_figure
from cbct_toxicity.regnet.base import BaseRegistrator
from cbct_toxicity.regnet.dir_model import save_dir_model, stage_pairs, train_dir
from cbct_toxicity.regnet.factory import initialize_registrators, stage_lambda
from cbct_toxicity.regnet.rigid import rigid_register
from cbct_toxicity.regnet.unet import UNetConfig
from cbct_toxicity.toxnet.fusion import save_fusion_model
from cbct_toxicity.toxnet.training import predict_labels, train_classifier
from cbct_toxicity.volio import (
    Volume,
    adaptive_mask,
    preprocess,
    read_volume,
    write_mask,
    write_volume,
)

logging.basicConfig(
    level=logging.INFO,
    format="%(asctime)s | %(levelname)s | %(message)s",
    datefmt="%Y-%m-%d %H:%M:%S",
    stream=sys.stderr,
)

logger = logging.getLogger(__name__)

PARTIAL_RUN_FILE = "PARTIAL_RUN.json"

Handler = Callable[[RunConfig, Path], Awaitable[None]]


def effect_config(config: RunConfig) -> EffectConfig:
    return EffectConfig(
        target=config.target,
        strength=config.strength,
        base_rate=config.base_rate,
        time_profile=config.time_profile,
    )


def load_cohort(config: RunConfig) -> SyntheticCohort:
    """Read ``config.input`` when given, otherwise generate the cohort from the config."""
    effect = effect_config(config)
    if config.input:
        logger.info(f"Reading cohort from {config.input}")
        return read_cohort(config.input, effect)
    fractions = sorted({*config.fractions, config.study_fraction})
    logger.info(f"Generating a {config.n_patients}-patient cohort (seed {config.seed})")
    return synth_cohort(
        config.n_patients,
        config.seed,
        effect,
        fractions=fractions,
        grid=config.grid,
        spacing_mm=config.spacing_mm,
        deformation_mm=config.deformation_mm,
    )


def load_series(directory: str, config: RunConfig) -> Tuple[List[Volume], List[List[Volume]]]:
    """pCTs and CBCT series (fraction 0 first) of a phantom or cohort directory."""
    if (Path(directory) / PHANTOM_FILE).is_file():
        case = read_phantom(directory)
        return [case.pct], [[case.cbct[t] for t in case.fractions]]
    cohort = read_cohort(directory, effect_config(config))
    return (
        [p.pct for p in cohort.patients],
        [[p.cbct[t] for t in cohort.fractions] for p in cohort.patients],
    )


def study_registrators(config: RunConfig) -> Optional[Dict[str, BaseRegistrator]]:
    if config.jacobian_source != "registered":
        return None
    return initialize_registrators(
        config, model_paths={MODALITY_STAGE: config.model_a, ANATOMY_STAGE: config.model_b}
    )


async def run_phantom(config: RunConfig, out: Path):
    case = synth_phantom(
        config.seed,
        config.deformation_mm,
        grid=config.grid,
        fractions=config.fractions,
        spacing_mm=config.spacing_mm,
    )
    write_phantom(case, out)
    logger.info(f"Phantom with fractions {case.fractions} written")


async def run_cohort(config: RunConfig, out: Path):
    write_cohort(load_cohort(config), out)


async def run_preprocess(config: RunConfig, out: Path):
    vol = read_volume(config.input)
    size = (config.crop_size,) * 3
    result = preprocess(vol, config.spacing_mm, size, config.center)
    write_volume(result, out / "preprocessed.v3j")
    summary: Dict[str, Any] = {"dims": result.dims, "spacing-mm": result.spacing_mm}
    if config.mask:
        mask = adaptive_mask(result)
        write_mask(mask, out / "mask.v3j")
        summary["mask-fraction"] = float(mask.data.mean())
    write_json(summary, out / "preprocess.json")


async def run_rigid(config: RunConfig, out: Path):
    fixed = read_volume(config.fixed)
    moving = read_volume(config.moving)
    transform, report = rigid_register(fixed, moving, config.rigid_levels, config.rigid_iters)
    write_volume(apply_rigid(moving, transform, reference=fixed), out / "aligned.v3j")
    write_json({"transform": transform.to_dict(), "report": report.to_dict()}, out / "rigid.json")
    show_summary("Rigid registration", {"ncc": report.ncc, "iterations": report.iterations})


async def run_reg_train(config: RunConfig, out: Path):
    pct_series, cbct_series = load_series(config.input, config)
    pairs = stage_pairs(pct_series, cbct_series, config.stage)
    logger.info(f"Training the {config.stage} model on {len(pairs)} pairs")
    model, report = train_dir(
        pairs,
        stage_lambda(config, config.stage),
        config.stage,
        epochs=config.reg_epochs,
        batch=config.reg_batch,
        lr=config.reg_lr,
        patience=config.reg_patience,
        seed=config.seed,
        config=UNetConfig(config.unet_encoder, config.unet_decoder),
    )
    save_dir_model(model, out / f"dir_{config.stage}.ckpt")
    write_json(report.to_dict(), out / "report.json")
    show_summary(f"DIR training ({config.stage})", {"ncc": report.ncc, "epochs": report.epochs})


async def run_reg_apply(config: RunConfig, out: Path):
    case = read_phantom(config.input)
    if config.study_fraction not in case.cbct:
        raise ValueError(f"Phantom has no fraction {config.study_fraction}, got {case.fractions}")
    registrators = initialize_registrators(
        config, model_paths={MODALITY_STAGE: config.model_a, ANATOMY_STAGE: config.model_b}
    )
    result, metrics = await asyncio.to_thread(
        registration_study, case, registrators, config.study_fraction, config
    )
    write_volume(result.aligned_ct, out / "aligned_ct.v3j")
    write_volume(result.composed, out / "dvf.v3j")
    write_volume(result.jacobian, out / "jacobian.v3j")
    write_json(metrics, out / "registration.json")
    show_summary("Two-stage registration", metrics)


async def run_jacobian(config: RunConfig, out: Path):
    dvf = DisplacementField.from_volume(read_volume(config.input))
    jf = jacobian_field(dvf)
    if config.jacobian_mode == JACOBIAN_DETERMINANT:
        write_volume(jacobian_determinant(jf), out / "jacobian.v3j")
    else:
        write_volume(jf, out / "jacobian.v3j")
    summary = jacobian_summary(jf)
    write_json(summary, out / "jacobian.json")
    show_summary("Jacobian", summary)


async def run_tox_train(config: RunConfig, out: Path):
    cohort = load_cohort(config)
    dataset = assemble_dataset(
        cohort, config.study_fraction, config, config.branches, study_registrators(config)
    )
    channels = 0 if dataset.jacobian is None else dataset.jacobian.shape[1]
    fusion = fusion_config(config.branches, config, channels)
    train_idx, val_idx = validation_split(dataset.labels, np.random.default_rng(config.seed))
    train = dataset.subset(train_idx)
    val = None if val_idx is None else dataset.subset(val_idx)
    model, history = await asyncio.to_thread(
        train_classifier,
        train,
        val,
        fusion,
        config.tox_epochs,
        config.tox_batch,
        config.tox_lr,
        config.seed,
    )
    save_fusion_model(
        model, out / "model.ckpt", {"target": config.target, "fraction": config.study_fraction}
    )
    write_history(history, out / "history.csv")
    summary: Dict[str, Any] = {"best-epoch": history.best_epoch, "train-size": len(train)}
    if val is not None:
        report = confusion_metrics(predict_labels(model, val, config.tox_batch), val.labels)
        summary.update({"val-size": len(val), **report.summary()})
    write_json(summary, out / "metrics.json")
    show_summary("Toxicity classifier", summary)


def _write_histories(rows: List[CrossValidation], out: Path):
    directory = out / "histories"
    directory.mkdir(exist_ok=True)
    for row in rows:
        for fold, history in enumerate(row.histories):
            name = f"{row.combination}_t{row.fraction:02d}_fold{fold}.csv"
            write_history(history, directory / name)


async def run_ablate(config: RunConfig, out: Path):
    cohort = load_cohort(config)
    result = await ablation_study(
        cohort,
        config.combinations,
        config.study_fraction,
        config,
        registrators=study_registrators(config),
    )
    write_metrics_tables(result.rows, out)
    _write_histories(result.rows, out)
    aggregate = aggregate_frame(result.rows)
    show_ablation(aggregate, f"Branch ablation, {config.target} at fraction {result.fraction}")
    if config.plot:
        save_figure(plot_ablation(aggregate), out / "ablation.png")


async def run_evolve(config: RunConfig, out: Path):
    cohort = load_cohort(config)
    result = await risk_evolution(
        cohort, config.fractions, config, registrators=study_registrators(config)
    )
    write_evolution(result, out)
    _write_histories(result.rows, out)
    show_evolution(result.table)
    if config.plot:
        save_figure(plot_evolution(result.table), out / "evolution.png")


async def run_gradcheck(config: RunConfig, out: Path):
    results = await asyncio.to_thread(run_suite, config.seed)
    show_gradcheck(results)
    failed = results.loc[~results[Columns.PASSED], Columns.LAYER].tolist()
    if failed:
        raise GradcheckError(f"Gradient check failed for {failed}")
    results.to_csv(out / "gradcheck.csv", index=False)


COMMAND_HANDLERS: Dict[str, Handler] = {
    "phantom": run_phantom,
    "cohort": run_cohort,
    "preprocess": run_preprocess,
    "reg-rigid": run_rigid,
    "reg-train": run_reg_train,
    "reg-apply": run_reg_apply,
    "jacobian": run_jacobian,
    "tox-train": run_tox_train,
    "ablate": run_ablate,
    "evolve": run_evolve,
    "gradcheck": run_gradcheck,
}


def _publish(staging: Path, output: Path):
    if output.exists():
        shutil.rmtree(output)
    os.replace(staging, output)


def _mark_partial(output: Path, command: str, error: BaseException):
    output.mkdir(parents=True, exist_ok=True)
    write_json(
        {"command": command, "error": type(error).__name__, "message": str(error)},
        output / PARTIAL_RUN_FILE,
    )


async def run(args=None):
    if args is None:
        args = cli_config.parse_args()
    command = args.command
    config = resolve_config(args)
    if config.debug:
        logging.getLogger().setLevel(logging.DEBUG)

    output = Path(config.output)
    output.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{output.name}.", dir=output.parent))
    logger.info(f"Running `{command}` into {output}")
    try:
        await COMMAND_HANDLERS[command](config, staging)
        write_run_config(config, staging)
    except BaseException as error:
        shutil.rmtree(staging, ignore_errors=True)
        _mark_partial(output, command, error)
        raise
    _publish(staging, output)
    logger.info(f"Outputs written to {output}")


def main(argv=None):
    args = cli_config.parse_args(argv)
    try:
        asyncio.run(run(args))
    except Exception as error:
        logger.debug("Run failed", exc_info=True)
        payload = {"error": type(error).__name__, "message": str(error), "command": args.command}
        print(json.dumps(payload), file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
