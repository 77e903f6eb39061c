from typing import Dict, List, Mapping, Optional

from cbct_toxicity.common import ANATOMY_STAGE, MODALITY_STAGE, STAGES
from cbct_toxicity.config import RunConfig
from cbct_toxicity.regnet.base import BaseRegistrator, RegistrationReport
from cbct_toxicity.regnet.dir_model import Pair, load_dir_model, train_dir
from cbct_toxicity.regnet.direct import DirectFieldRegistrator
from cbct_toxicity.regnet.unet import UNetConfig


def stage_lambda(config: RunConfig, stage: str) -> float:
    return config.lambda_modality if stage == MODALITY_STAGE else config.lambda_anatomy


def initialize_registrators(
    config: RunConfig,
    training_pairs: Optional[Mapping[str, List[Pair]]] = None,
    model_paths: Optional[Mapping[str, str]] = None,
    reports: Optional[Dict[str, RegistrationReport]] = None,
) -> Dict[str, BaseRegistrator]:
    """One registrator per stage for ``config.reg_engine``.

    The unet engine loads ``model_paths[stage]`` when given and otherwise
    trains on ``training_pairs[stage]``; training reports land in ``reports``.
    """

    def create_direct_registrator(stage: str) -> BaseRegistrator:
        return DirectFieldRegistrator(
            stage,
            stage_lambda(config, stage),
            iters=config.direct_iters,
            levels=config.direct_levels,
        )

    def create_unet_registrator(stage: str) -> BaseRegistrator:
        if model_paths and model_paths.get(stage):
            return load_dir_model(model_paths[stage])
        if not training_pairs or not training_pairs.get(stage):
            raise ValueError(f"No checkpoint or training pairs for the `{stage}` stage")
        model, report = train_dir(
            training_pairs[stage],
            stage_lambda(config, stage),
            stage,
            epochs=config.reg_epochs,
            batch=config.reg_batch,
            lr=config.reg_lr,
            patience=config.reg_patience,
            seed=config.seed + STAGES.index(stage),
            config=UNetConfig(config.unet_encoder, config.unet_decoder),
        )
        if reports is not None:
            reports[stage] = report
        return model

    engine_mapping = {
        "direct": create_direct_registrator,
        "unet": create_unet_registrator,
    }
    if config.reg_engine not in engine_mapping:
        raise ValueError(f"Unsupported registration engine `{config.reg_engine}`")

    create = engine_mapping[config.reg_engine]
    return {stage: create(stage) for stage in (MODALITY_STAGE, ANATOMY_STAGE)}
