import math

import numpy as np
import pytest

from cbct_toxicity.cohort.synthetic import (
    DegenerateCohortError,
    EffectConfig,
    bayes_decisions,
    label_probability,
    radial_field,
    read_cohort,
    region_mask,
    regional_volume_change,
    synth_cohort,
    write_cohort,
)
from cbct_toxicity.common import HOSPITALIZATION, NG_TUBE, TOXICITIES
from cbct_toxicity.field import DisplacementField
from cbct_toxicity.volio import Volume


@pytest.fixture(scope="module")
def cohort():
    return synth_cohort(20, seed=5, effect=EffectConfig(), fractions=(5, 10), grid=12)


def reference(n=16, spacing=2.0):
    return Volume(np.zeros((1, n, n, n)), (spacing,) * 3)


class TestEffect:
    def test_profiles(self):
        linear = EffectConfig(time_profile="linear")
        constant = EffectConfig(time_profile="constant")
        assert linear.profile(0, 30) == 0.0
        assert linear.profile(15, 30) == 0.5
        assert constant.profile(0, 30) == 0.0
        assert constant.profile(5, 30) == 1.0

    @pytest.mark.parametrize(
        "kwargs",
        [{"target": "xerostomia"}, {"time_profile": "step"}, {"base_rate": 1.0}, {"strength": -1}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            EffectConfig(**kwargs)


def test_label_probability_at_mean_is_base_rate():
    assert label_probability(np.array([0.0]), 4.0, 0.3)[0] == pytest.approx(0.3)


def test_label_probability_increases_with_change():
    p = label_probability(np.linspace(-2, 2, 9), 4.0, 0.3)
    assert np.all(np.diff(p) > 0)


def test_zero_strength_gives_base_rate_everywhere():
    np.testing.assert_allclose(label_probability(np.linspace(-2, 2, 5), 0.0, 0.2), 0.2)


def pooled_cohorts(effect, seeds=(0, 1, 2, 3), n=150):
    return [synth_cohort(n, seed, effect, fractions=(5,), grid=8) for seed in seeds]


def test_label_prevalence_matches_base_rate():
    # mean probability lies within 0.05 * strength**2 of the base rate for standardized scores
    cohorts = pooled_cohorts(EffectConfig(strength=0.5, base_rate=0.3))
    labels = np.concatenate([c.labels() for c in cohorts])
    binomial_error = math.sqrt(0.3 * 0.7 / len(labels))
    assert abs(labels.mean() - 0.3) <= 0.05 * 0.5**2 + 3 * binomial_error


def test_labels_are_drawn_from_oracle_probabilities():
    cohorts = pooled_cohorts(EffectConfig())
    labels = np.concatenate([c.labels() for c in cohorts])
    probabilities = np.concatenate([c.probabilities() for c in cohorts])
    binomial_error = math.sqrt((probabilities * (1 - probabilities)).sum()) / len(labels)
    assert abs(labels.mean() - probabilities.mean()) <= 3.5 * binomial_error


def test_bayes_decisions_threshold_at_prevalence():
    np.testing.assert_array_equal(bayes_decisions([0.1, 0.3, 0.5], 0.3), [0, 1, 1])


def test_region_mask_is_a_ball():
    mask = region_mask(reference(), (0.0, 0.0, 0.0), 0.25)
    assert mask.data[0, 8, 8, 8] == 1
    assert mask.data[0, 0, 0, 0] == 0
    assert np.array_equal(mask.data, mask.data[:, ::-1, ::-1, ::-1])


def test_radial_field_peaks_at_requested_magnitude():
    like = reference(33, 1.0)
    region = region_mask(like, (0.0, 0.0, 0.0), 0.2)
    u = radial_field(like, region, 3.0, 0.2)
    magnitude = np.sqrt((u**2).sum(axis=0))
    assert magnitude.max() <= 3.0 + 1e-9
    assert magnitude.max() == pytest.approx(3.0, rel=0.05)


@pytest.mark.parametrize("peak, sign", [(2.0, 1.0), (-2.0, -1.0)])
def test_expansion_and_shrinkage(peak, sign):
    like = reference()
    region = region_mask(like, (0.0, 0.0, 0.0), 0.2)
    u = DisplacementField(radial_field(like, region, peak, 0.2), like.spacing_mm)
    assert np.sign(regional_volume_change(u, region)) == sign


class TestSynthCohort:
    def test_size_and_fractions(self, cohort):
        assert len(cohort.patients) == 20
        assert cohort.fractions == [0, 5, 10]
        assert all(sorted(p.cbct) == [0, 5, 10] for p in cohort.patients)

    def test_every_toxicity_is_labelled(self, cohort):
        for record in cohort.records:
            assert set(record.labels) == set(TOXICITIES)

    def test_target_has_both_classes(self, cohort):
        labels = cohort.labels()
        assert 0 < labels.sum() < len(labels)

    def test_labels_follow_regional_change(self, cohort):
        changes = np.array([p.regional_change for p in cohort.patients])
        probabilities = cohort.probabilities()
        assert np.all(np.diff(probabilities[np.argsort(changes)]) >= 0)

    def test_baseline_fraction_is_undeformed(self, cohort):
        for patient in cohort.patients:
            assert not patient.dvf[0].data.any()

    def test_seeded(self, cohort):
        again = synth_cohort(20, seed=5, effect=EffectConfig(), fractions=(5, 10), grid=12)
        np.testing.assert_array_equal(again.labels(), cohort.labels())
        assert again.patients[3].cbct[5].data.tobytes() == cohort.patients[3].cbct[5].data.tobytes()

    def test_other_target(self):
        effect = EffectConfig(target=HOSPITALIZATION, base_rate=0.4)
        cohort = synth_cohort(12, seed=2, effect=effect, fractions=(5,), grid=8)
        assert cohort.labels().shape == (12,)
        assert cohort.labels(NG_TUBE).shape == (12,)

    def test_minimum_size(self):
        with pytest.raises(ValueError, match="at least 10"):
            synth_cohort(5, seed=0, effect=EffectConfig(), grid=8)

    def test_single_class_draw(self):
        effect = EffectConfig(strength=0.0, base_rate=1e-9)
        with pytest.raises(DegenerateCohortError):
            synth_cohort(10, seed=0, effect=effect, fractions=(5,), grid=8)

    def test_write_read_round_trip(self, cohort, tmp_path):
        write_cohort(cohort, tmp_path)
        back = read_cohort(tmp_path, cohort.effect)
        assert [r.id for r in back.records] == [r.id for r in cohort.records]
        np.testing.assert_array_equal(back.labels(), cohort.labels())
        np.testing.assert_allclose(back.probabilities(), cohort.probabilities())
        assert back.fractions == cohort.fractions
        first, original = back.patients[0], cohort.patients[0]
        assert first.dvf[10].data.tobytes() == original.dvf[10].data.tobytes()
        assert first.cbct[5].data.tobytes() == original.cbct[5].data.tobytes()
        np.testing.assert_array_equal(back.region.data, cohort.region.data)
