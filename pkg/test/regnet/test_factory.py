import numpy as np
import pytest

from cbct_toxicity.common import ANATOMY_STAGE, MODALITY_STAGE
from cbct_toxicity.config import RunConfig
from cbct_toxicity.regnet.dir_model import DirModel, save_dir_model, train_dir
from cbct_toxicity.regnet.direct import DirectFieldRegistrator
from cbct_toxicity.regnet.factory import initialize_registrators, stage_lambda
from cbct_toxicity.regnet.unet import UNetConfig


def test_stage_lambdas():
    config = RunConfig(lambda_modality=1.0, lambda_anatomy=0.5)
    assert stage_lambda(config, MODALITY_STAGE) == 1.0
    assert stage_lambda(config, ANATOMY_STAGE) == 0.5


def test_direct_engine():
    registrators = initialize_registrators(RunConfig(reg_engine="direct", direct_iters=7))
    assert set(registrators) == {MODALITY_STAGE, ANATOMY_STAGE}
    assert isinstance(registrators[ANATOMY_STAGE], DirectFieldRegistrator)
    assert registrators[ANATOMY_STAGE].lam == 0.5
    assert registrators[MODALITY_STAGE].iters == 7


def test_unsupported_engine():
    with pytest.raises(ValueError, match="Unsupported registration engine"):
        initialize_registrators(RunConfig(reg_engine="demons"))


def test_unet_engine_needs_pairs_or_checkpoints():
    with pytest.raises(ValueError, match="No checkpoint or training pairs"):
        initialize_registrators(RunConfig(reg_engine="unet"))


def test_unet_engine_loads_checkpoints(make_blob, tmp_path):
    pairs = [(make_blob(n=8), make_blob(n=8, center_mm=(8.0, 7.0, 7.0))) for _ in range(3)]
    config = UNetConfig((4, 4), (4, 4, 4))
    paths = {}
    for stage in (MODALITY_STAGE, ANATOMY_STAGE):
        model, _ = train_dir(pairs, 0.5, stage, epochs=1, config=config)
        paths[stage] = str(tmp_path / f"{stage}.ckpt")
        save_dir_model(model, paths[stage])
    registrators = initialize_registrators(RunConfig(reg_engine="unet"), model_paths=paths)
    assert all(isinstance(r, DirModel) for r in registrators.values())
    assert registrators[ANATOMY_STAGE].stage == ANATOMY_STAGE


def test_unet_engine_trains_and_collects_reports(make_blob):
    pairs = [(make_blob(n=8), make_blob(n=8, center_mm=(8.0, 7.0, 7.0))) for _ in range(3)]
    config = RunConfig(
        reg_engine="unet", reg_epochs=1, unet_encoder=(4, 4), unet_decoder=(4, 4, 4)
    )
    reports = {}
    registrators = initialize_registrators(
        config, training_pairs={MODALITY_STAGE: pairs, ANATOMY_STAGE: pairs}, reports=reports
    )
    assert set(reports) == {MODALITY_STAGE, ANATOMY_STAGE}
    assert reports[MODALITY_STAGE].lam == 1.0
    assert np.isfinite(reports[ANATOMY_STAGE].final_loss)
    assert registrators[MODALITY_STAGE].config.encoder_channels == (4, 4)
