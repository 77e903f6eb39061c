import math

import numpy as np
import pytest

from cbct_toxicity.cohort.records import Landmark
from cbct_toxicity.common import Columns
from cbct_toxicity.evalx.metrics import (
    DegenerateFitError,
    EvolutionTable,
    LandmarkOutsideGridError,
    SingleClassError,
    StratificationError,
    aggregate_folds,
    confusion_metrics,
    fold_hash,
    kfold_split,
    linear_fit_r2,
    tre,
)
from cbct_toxicity.field import DisplacementField
from cbct_toxicity.volio import Volume


class TestConfusionMetrics:
    def test_known_counts(self):
        fold = confusion_metrics([1, 0, 0, 1, 1, 0], [1, 1, 0, 0, 1, 0]).folds[0]
        assert (fold.tp, fold.fn, fold.tn, fold.fp) == (2, 1, 2, 1)
        assert fold.sensitivity == pytest.approx(2 / 3)
        assert fold.bacc == pytest.approx(2 / 3)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, n)
            labels[:2] = (0, 1)
            predictions = rng.integers(0, 2, n)
            positives = [p for p, y in zip(predictions, labels) if y == 1]
            negatives = [p for p, y in zip(predictions, labels) if y == 0]
            sensitivity = sum(positives) / len(positives)
            specificity = negatives.count(0) / len(negatives)
            report = confusion_metrics(predictions, labels)
            assert report.mean("sensitivity") == pytest.approx(sensitivity)
            assert report.mean("specificity") == pytest.approx(specificity)
            assert report.bacc == pytest.approx((sensitivity + specificity) / 2)
            assert 0.0 <= report.bacc <= 1.0

    def test_constant_predictions_score_one_half(self):
        assert confusion_metrics([1] * 5, [0, 1, 0, 0, 1]).bacc == 0.5
        assert confusion_metrics([0] * 5, [0, 1, 0, 0, 1]).bacc == 0.5

    def test_single_class(self):
        with pytest.raises(SingleClassError):
            confusion_metrics([1, 0, 1], [1, 1, 1])

    @pytest.mark.parametrize("predictions, labels", [([0, 2], [0, 1]), ([0, 1, 1], [0, 1])])
    def test_invalid(self, predictions, labels):
        with pytest.raises(ValueError):
            confusion_metrics(predictions, labels)


def test_aggregate_uses_population_std():
    report = aggregate_folds(
        [confusion_metrics([1, 0], [1, 0]), confusion_metrics([1, 1, 0, 0], [1, 0, 1, 0])]
    )
    assert len(report.folds) == 2
    assert report.mean("bacc") == pytest.approx(0.75)
    assert report.std("bacc") == pytest.approx(0.25)
    summary = report.summary()
    assert summary[Columns.BACC_MEAN] == pytest.approx(0.75)
    assert list(report.to_frame()[Columns.FOLD]) == [0, 1]


class TestKfoldSplit:
    @pytest.mark.parametrize("n, k", [(10, 5), (23, 5), (7, 3), (40, 4)])
    def test_partition_with_balanced_sizes(self, n, k):
        ids = [f"P{i:03d}" for i in range(n)]
        folds = kfold_split(ids, k, seed=1)
        assert len(folds) == k
        assert sorted(i for fold in folds for i in fold) == ids
        sizes = [len(fold) for fold in folds]
        assert max(sizes) - min(sizes) <= 1

    def test_stratified(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(15, 60))
            labels = np.zeros(n, dtype=int)
            labels[rng.choice(n, size=int(rng.integers(5, n - 5)), replace=False)] = 1
            ids = list(range(n))
            folds = kfold_split(ids, 5, seed=int(rng.integers(1000)), stratify_labels=labels)
            positives = [int(labels[fold].sum()) for fold in folds]
            sizes = [len(fold) for fold in folds]
            assert max(positives) - min(positives) <= 1
            assert max(sizes) - min(sizes) <= 1
            assert sorted(i for fold in folds for i in fold) == ids

    def test_seeded(self):
        ids = list(range(20))
        assert kfold_split(ids, 5, seed=3) == kfold_split(ids, 5, seed=3)
        assert kfold_split(ids, 5, seed=3) != kfold_split(ids, 5, seed=4)

    def test_hash_identifies_assignment(self):
        ids = list(range(20))
        first = kfold_split(ids, 5, seed=3)
        assert fold_hash(first) == fold_hash(kfold_split(ids, 5, seed=3))
        assert fold_hash(first) != fold_hash(kfold_split(ids, 5, seed=4))
        assert len(fold_hash(first)) == 64

    def test_too_few_in_a_class(self):
        with pytest.raises(StratificationError):
            kfold_split(list(range(10)), 5, stratify_labels=[1, 1, 1, 0, 0, 0, 0, 0, 0, 0])

    @pytest.mark.parametrize("ids, k", [([1, 2, 3], 1), ([1, 1, 2], 2), ([1, 2], 3)])
    def test_invalid(self, ids, k):
        with pytest.raises(ValueError):
            kfold_split(ids, k)


def grid_volume(n=6, spacing=2.0):
    return Volume(np.zeros((1, n, n, n)), (spacing,) * 3)


class TestTre:
    def test_identity_field(self):
        landmarks = [Landmark("a", (2.0, 2.0, 2.0), (2.0, 2.0, 2.0))]
        assert tre(landmarks, DisplacementField.zeros(grid_volume())) == (0.0, 0.0)

    def test_uncorrected_offset(self):
        landmarks = [
            Landmark("a", (2.0, 2.0, 2.0), (5.0, 6.0, 2.0)),
            Landmark("b", (4.0, 4.0, 4.0), (4.0, 4.0, 5.0)),
        ]
        mean, std = tre(landmarks, DisplacementField.zeros(grid_volume()))
        assert mean == pytest.approx(3.0)
        assert std == pytest.approx(2.0)

    def test_translation_recovers_landmarks(self):
        field = DisplacementField.translation(grid_volume(), (1.5, -2.0, 0.5))
        landmarks = [
            Landmark(str(i), p, (p[0] + 1.5, p[1] - 2.0, p[2] + 0.5))
            for i, p in enumerate([(1.0, 3.0, 5.0), (7.5, 0.0, 2.2)])
        ]
        mean, _ = tre(landmarks, field)
        assert mean == pytest.approx(0.0, abs=1e-6)

    def test_order_and_ids_do_not_matter(self):
        rng = np.random.default_rng(11)
        like = grid_volume()
        field = DisplacementField(rng.normal(0.0, 1.0, (3, 6, 6, 6)), like.spacing_mm)
        fixed = rng.uniform(0.0, 10.0, (8, 3))
        moving = fixed + rng.normal(0.0, 2.0, (8, 3))
        landmarks = [
            Landmark(f"L{i}", tuple(f), tuple(m)) for i, (f, m) in enumerate(zip(fixed, moving))
        ]
        relabeled = [
            Landmark(f"R{k}", landmarks[i].fixed_mm, landmarks[i].moving_mm)
            for k, i in enumerate(rng.permutation(8))
        ]
        np.testing.assert_allclose(tre(relabeled, field), tre(landmarks, field), rtol=1e-12)

    def test_outside_grid(self):
        landmarks = [Landmark("far", (30.0, 0.0, 0.0), (30.0, 0.0, 0.0))]
        with pytest.raises(LandmarkOutsideGridError, match="far"):
            tre(landmarks, DisplacementField.zeros(grid_volume()))

    def test_no_landmarks(self):
        with pytest.raises(ValueError):
            tre([], DisplacementField.zeros(grid_volume()))


class TestLinearFit:
    def test_matches_polyfit(self):
        rng = np.random.default_rng(4)
        for _ in range(150):
            n = int(rng.integers(3, 12))
            xs = np.sort(rng.choice(np.arange(1, 36), size=n, replace=False)).astype(float)
            ys = rng.uniform(0.4, 0.9, n)
            slope, intercept, r2 = linear_fit_r2(xs, ys)
            expected_slope, expected_intercept = np.polyfit(xs, ys, 1)
            assert slope == pytest.approx(expected_slope, abs=1e-9)
            assert intercept == pytest.approx(expected_intercept, abs=1e-9)
            assert r2 == pytest.approx(np.corrcoef(xs, ys)[0, 1] ** 2, abs=1e-9)

    def test_exact_line(self):
        slope, intercept, r2 = linear_fit_r2([5, 10, 15, 20], [0.55, 0.6, 0.65, 0.7])
        assert slope == pytest.approx(0.01)
        assert intercept == pytest.approx(0.5)
        assert r2 == pytest.approx(1.0)

    def test_constant_ys(self):
        assert linear_fit_r2([1, 2, 3], [0.5, 0.5, 0.5]) == (0.0, 0.5, 0.0)

    @pytest.mark.parametrize("xs, ys", [([1, 2], [0.1, 0.2]), ([4, 4, 4], [0.1, 0.2, 0.3])])
    def test_degenerate(self, xs, ys):
        with pytest.raises(DegenerateFitError):
            linear_fit_r2(xs, ys)


class TestEvolutionTable:
    def test_correlation_threshold(self):
        table = EvolutionTable("ng_tube", [0, 5, 10], [0.5, 0.6, 0.7], [0.0, 0.0, 0.0], r2=0.95)
        assert table.correlated
        table.r2 = 0.5
        assert not table.correlated

    def test_unfitted_table(self):
        table = EvolutionTable("ng_tube", [0, 5], [0.5, 0.6], [0.1, 0.1])
        assert not table.correlated
        assert math.isnan(table.fit_summary()["slope"])

    def test_frame(self):
        table = EvolutionTable("ng_tube", [0, 5, 10], [0.5, 0.6, 0.7], [0.1, 0.0, 0.2])
        frame = table.to_frame()
        assert list(frame.columns) == [Columns.FRACTION, Columns.BACC_MEAN, Columns.BACC_STD]
        assert list(frame[Columns.FRACTION]) == [0, 5, 10]
