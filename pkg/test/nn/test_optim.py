import numpy as np
import pytest

from cbct_toxicity.nn.layers import Parameter
from cbct_toxicity.nn.optim import Adam, TrainSchedule, adam_step, onecycle_lr


class TestAdam:
    def test_zero_gradient_leaves_parameter_unchanged(self):
        p = Parameter(np.array([1.0, -2.0]))
        adam_step([p], [np.zeros(2)], lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_missing_gradient_is_skipped(self):
        p = Parameter(np.array([1.0]))
        adam_step([p], [None], lr=0.1)
        assert p.step == 0

    def test_first_step_moves_by_learning_rate(self):
        p = Parameter(np.array([1.0, 1.0, 1.0]))
        adam_step([p], [np.array([0.5, -3.0, 1e3])], lr=0.01)
        np.testing.assert_allclose(p.data, [0.99, 1.01, 0.99], atol=1e-7)
        assert p.step == 1

    def test_minimizes_a_quadratic(self):
        p = Parameter(np.array([3.0, -2.0]))
        optimizer = Adam([p], lr=0.1)
        start = float((p.data**2).sum())
        for _ in range(100):
            optimizer.zero_grad()
            (p * p).sum().backward()
            optimizer.step()
        assert float((p.data**2).sum()) < start * 0.1

    def test_gradient_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step([Parameter(np.ones(2))], [np.ones(3)], lr=0.1)

    def test_keeps_parameter_dtype(self):
        p = Parameter(np.ones(2, dtype=np.float32))
        adam_step([p], [np.ones(2)], lr=0.1)
        assert p.dtype == np.float32


class TestOneCycle:
    def test_endpoints(self):
        schedule = TrainSchedule(max_lr=1e-3, total_steps=100)
        assert onecycle_lr(schedule, 0) == pytest.approx(1e-3 / 25)
        assert onecycle_lr(schedule, 99) == pytest.approx(1e-3 / 1e4)

    def test_peak(self):
        schedule = TrainSchedule(max_lr=1e-3, total_steps=100)
        assert schedule.peak_step == 30
        assert onecycle_lr(schedule, 30) == pytest.approx(1e-3)
        assert max(onecycle_lr(schedule, s) for s in range(100)) == pytest.approx(1e-3)

    def test_monotone_on_each_side_of_peak(self):
        schedule = TrainSchedule(max_lr=0.05, total_steps=40)
        rates = [onecycle_lr(schedule, s) for s in range(40)]
        peak = schedule.peak_step
        assert all(a <= b for a, b in zip(rates[:peak], rates[1 : peak + 1]))
        assert all(a >= b for a, b in zip(rates[peak:], rates[peak + 1 :]))

    def test_continuous(self):
        schedule = TrainSchedule(max_lr=1.0, total_steps=1000)
        rates = np.array([onecycle_lr(schedule, s) for s in range(1000)])
        assert np.abs(np.diff(rates)).max() < 0.01

    def test_two_step_schedule(self):
        schedule = TrainSchedule(max_lr=1.0, total_steps=2)
        assert schedule.peak_step == 1
        assert onecycle_lr(schedule, 1) == pytest.approx(1.0)

    @pytest.mark.parametrize("step", [-1, 100])
    def test_step_out_of_range(self, step):
        with pytest.raises(ValueError):
            onecycle_lr(TrainSchedule(max_lr=1e-3, total_steps=100), step)

    @pytest.mark.parametrize(
        "kwargs",
        [{"total_steps": 1}, {"pct_start": 0.0}, {"pct_start": 1.0}, {"div_factor": 1.0}],
    )
    def test_invalid_schedule(self, kwargs):
        with pytest.raises(ValueError):
            TrainSchedule(**{"max_lr": 1e-3, "total_steps": 10, **kwargs})
