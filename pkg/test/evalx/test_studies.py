import asyncio
import threading
import time
from dataclasses import replace

import numpy as np
import pytest

from cbct_toxicity.cohort.phantom import synth_phantom
from cbct_toxicity.cohort.records import Landmark
from cbct_toxicity.common import (
    ANATOMY_STAGE,
    CBCT_BRANCH,
    CLINICAL_BRANCH,
    JACOBIAN_BRANCH,
    JACOBIAN_DETERMINANT,
    MODALITY_STAGE,
)
from cbct_toxicity.config import RunConfig
from cbct_toxicity.evalx import studies
from cbct_toxicity.evalx.studies import (
    ablation_study,
    assemble_dataset,
    cross_validate,
    fold_seed,
    fusion_config,
    registration_study,
    risk_evolution,
    study_folds,
    validation_split,
)
from cbct_toxicity.field import DisplacementField, RigidTransform, apply_rigid
from cbct_toxicity.regnet.base import BaseRegistrator
from cbct_toxicity.toxnet.training import TrainingHistory


class OracleTrainer:
    """Predicts the true test labels and records what each fold saw."""

    def __init__(self):
        self.calls = []
        self.lock = threading.Lock()

    def __call__(self, train, val, test, fusion, seed):
        with self.lock:
            self.calls.append((train, val, test, fusion, seed))
        return test.labels.copy(), TrainingHistory(best_epoch=1)


class ZeroRegistrator(BaseRegistrator):
    def __init__(self, stage):
        self._stage = stage

    def predict(self, fixed, moving):
        return DisplacementField.zeros(fixed)


def study_config(**overrides):
    values = dict(folds=3, seed=1, threads=2, resnet_width=2)
    values.update(overrides)
    return RunConfig(**values)


class TestAssembleDataset:
    def test_stacks_requested_branches(self, small_cohort):
        branches = (CLINICAL_BRANCH, CBCT_BRANCH, JACOBIAN_BRANCH)
        dataset = assemble_dataset(small_cohort, 10, study_config(), branches)
        assert len(dataset) == 24
        assert dataset.clinical.shape == (24, 35)
        assert dataset.cbct.shape == (24, 1, 8, 8, 8)
        assert dataset.jacobian.shape == (24, 9, 8, 8, 8)
        assert dataset.masks is None
        np.testing.assert_array_equal(dataset.labels, small_cohort.labels())

    def test_determinant_mode_and_mask(self, small_cohort):
        config = study_config(jacobian_mode=JACOBIAN_DETERMINANT, mask=True)
        dataset = assemble_dataset(small_cohort, 5, config, (JACOBIAN_BRANCH,))
        assert dataset.jacobian.shape == (24, 1, 8, 8, 8)
        assert dataset.masks.shape == (24, 1, 8, 8, 8)
        assert dataset.clinical is None and dataset.cbct is None

    def test_baseline_jacobian_is_identity(self, small_cohort):
        config = study_config(jacobian_mode=JACOBIAN_DETERMINANT)
        dataset = assemble_dataset(small_cohort, 0, config, (JACOBIAN_BRANCH,))
        np.testing.assert_allclose(dataset.jacobian, 1.0)

    def test_unknown_fraction(self, small_cohort):
        with pytest.raises(ValueError, match="fraction 7"):
            assemble_dataset(small_cohort, 7, study_config(), (CLINICAL_BRANCH,))

    def test_registered_jacobians_need_registrators(self, small_cohort):
        config = study_config(jacobian_source="registered")
        with pytest.raises(ValueError, match="registrators"):
            assemble_dataset(small_cohort, 5, config, (JACOBIAN_BRANCH,))


def test_fusion_config_follows_branches():
    fusion = fusion_config((JACOBIAN_BRANCH, CLINICAL_BRANCH), study_config(), 9)
    assert fusion.branches == (CLINICAL_BRANCH, JACOBIAN_BRANCH)
    assert fusion.jacobian.in_channels == 9
    assert fusion.cbct is None


class TestValidationSplit:
    def test_stratified_share(self):
        labels = np.array([1] * 10 + [0] * 30)
        train, val = validation_split(labels, np.random.default_rng(0))
        assert labels[val].sum() == 2
        assert (labels[val] == 0).sum() == 5
        assert sorted(np.concatenate([train, val])) == list(range(40))

    def test_small_class_skips_validation(self):
        labels = np.array([1] + [0] * 9)
        train, val = validation_split(labels, np.random.default_rng(0))
        assert val is None
        assert list(train) == list(range(10))


def test_fold_seeds_differ():
    assert fold_seed(0, 0) != fold_seed(0, 1)
    assert fold_seed(3, 2) == fold_seed(3, 2)


def test_cross_validate_with_oracle(small_cohort):
    config = study_config()
    dataset = assemble_dataset(small_cohort, 5, config, (CLINICAL_BRANCH,))
    folds = study_folds(small_cohort, config)
    trainer = OracleTrainer()
    fusion = fusion_config((CLINICAL_BRANCH,), config, 0)
    row = asyncio.run(cross_validate(dataset, fusion, folds, config, trainer))
    assert row.combination == CLINICAL_BRANCH
    assert row.report.bacc == 1.0
    assert len(row.histories) == 3
    assert len(trainer.calls) == 3
    for train, val, test, _, _ in trainer.calls:
        assert not set(train.ids) & set(test.ids)
        assert val is None or not set(val.ids) & (set(train.ids) | set(test.ids))
        assert len(train) + len(test) + (0 if val is None else len(val)) == 24
    assert sorted(i for _, _, test, _, _ in trainer.calls for i in test.ids) == sorted(dataset.ids)


def test_ablation_shares_folds(small_cohort):
    config = study_config()
    combinations = [(CLINICAL_BRANCH,), (JACOBIAN_BRANCH,), (CLINICAL_BRANCH, JACOBIAN_BRANCH)]
    trainer = OracleTrainer()
    result = asyncio.run(ablation_study(small_cohort, combinations, 10, config, trainer))
    assert [row.combination for row in result.rows] == [
        "clinical",
        "jacobian",
        "clinical+jacobian",
    ]
    assert len({row.fold_hash for row in result.rows}) == 1
    assert all(row.fraction == 10 for row in result.rows)
    assert result.target == config.target
    assert len(trainer.calls) == 9


def test_risk_evolution_starts_from_clinical_baseline(small_cohort):
    config = study_config()
    trainer = OracleTrainer()
    result = asyncio.run(risk_evolution(small_cohort, (5, 10, 15), config, trainer))
    table = result.table
    assert table.fractions == [0, 5, 10, 15]
    assert table.bacc_mean == [1.0] * 4
    # a flat curve carries no linear trend
    assert table.r2 == 0.0
    assert not table.correlated
    baseline = [fusion for _, _, test, fusion, _ in trainer.calls if test.jacobian is None]
    assert len(baseline) == 3
    assert all(f.branches == (CLINICAL_BRANCH,) for f in baseline)


def test_risk_evolution_skips_fit_with_two_fractions(small_cohort):
    result = asyncio.run(risk_evolution(small_cohort, (5, 10), study_config(), OracleTrainer()))
    assert result.table.fractions == [0, 5, 10]
    assert np.isnan(result.table.slope)


def test_registration_study_reports_errors():
    case = synth_phantom(seed=2, deformation_mm=4.0, grid=12, fractions=(10,))
    registrators = {
        MODALITY_STAGE: ZeroRegistrator(MODALITY_STAGE),
        ANATOMY_STAGE: ZeroRegistrator(ANATOMY_STAGE),
    }
    config = study_config(rigid_levels=1, rigid_iters=2)
    result, metrics = registration_study(case, registrators, 10, config)
    offsets = [
        np.linalg.norm(np.subtract(lm.moving_mm, lm.fixed_mm)) for lm in case.landmarks[10]
    ]
    assert metrics["tre_before_mm"] == pytest.approx(np.mean(offsets))
    assert metrics["fraction"] == 10
    assert -1.0 <= metrics["ncc_after"] <= 1.0
    assert metrics["max_field_error_mm"] >= 0.0
    assert result.composed.same_grid(case.cbct[10])


def shifted_phantom(shift):
    """Undeformed phantom whose fraction-5 CBCT is translated by ``shift`` mm."""
    case = synth_phantom(seed=4, deformation_mm=0.0, grid=16, fractions=(5,))
    moved = RigidTransform(translation_mm=shift)
    landmarks = [
        Landmark(lm.id, tuple(np.add(lm.fixed_mm, shift)), lm.moving_mm)
        for lm in case.landmarks[5]
    ]
    return replace(
        case,
        cbct={**case.cbct, 5: apply_rigid(case.cbct[5], moved)},
        dvf={**case.dvf, 5: DisplacementField.translation(case.cbct[5], np.negative(shift))},
        landmarks={**case.landmarks, 5: landmarks},
    )


def test_registration_errors_include_the_rigid_step(monkeypatch):
    shift = (2.0, 0.0, 0.0)
    case = shifted_phantom(shift)
    aligned = RigidTransform(translation_mm=shift)
    monkeypatch.setattr(studies, "rigid_register", lambda *args: (aligned, None))
    registrators = {
        MODALITY_STAGE: ZeroRegistrator(MODALITY_STAGE),
        ANATOMY_STAGE: ZeroRegistrator(ANATOMY_STAGE),
    }
    _, metrics = registration_study(case, registrators, 5, study_config())
    assert metrics["tre_before_mm"] == pytest.approx(2.0)
    assert metrics["tre_after_mm"] == pytest.approx(0.0, abs=1e-6)
    assert metrics["max_field_error_mm"] == pytest.approx(0.0, abs=1e-6)
    assert metrics["ncc_rigid"] > metrics["ncc_before"]
    assert metrics["rigid"]["translation_mm"] == list(shift)


class CountingRegistrator(ZeroRegistrator):
    """Zero fields; tracks how many predictions run at once."""

    def __init__(self, stage, tracker):
        super().__init__(stage)
        self.tracker = tracker

    def predict(self, fixed, moving):
        with self.tracker["lock"]:
            self.tracker["active"] += 1
            self.tracker["peak"] = max(self.tracker["peak"], self.tracker["active"])
        time.sleep(0.001)
        with self.tracker["lock"]:
            self.tracker["active"] -= 1
        return super().predict(fixed, moving)


def test_registered_evolution_respects_thread_limit(small_cohort, monkeypatch):
    identity = RigidTransform.identity()
    monkeypatch.setattr(studies, "rigid_register", lambda *args, **kwargs: (identity, None))
    tracker = {"lock": threading.Lock(), "active": 0, "peak": 0}
    registrators = {
        stage: CountingRegistrator(stage, tracker) for stage in (MODALITY_STAGE, ANATOMY_STAGE)
    }
    config = study_config(threads=1, jacobian_source="registered")
    asyncio.run(risk_evolution(small_cohort, (5, 10, 15), config, OracleTrainer(), registrators))
    assert tracker["peak"] == 1
