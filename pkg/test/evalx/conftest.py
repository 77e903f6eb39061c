import pytest

from cbct_toxicity.cohort.synthetic import EffectConfig, synth_cohort


@pytest.fixture(scope="package")
def small_cohort():
    return synth_cohort(24, seed=7, effect=EffectConfig(), fractions=(5, 10, 15), grid=8)
