import math
from fractions import Fraction

import numpy as np
import pytest

from spotsgd.runtime import (RuntimeModel, binomial_active_mean, expected_completion_time_preemption,
                             expected_iteration_runtime, harmonic)


def test_examples(exp1):
    assert expected_iteration_runtime(1, exp1) == 1.0
    assert expected_iteration_runtime(2, exp1) == pytest.approx(1.5)
    assert expected_iteration_runtime(4, exp1) == pytest.approx(25 / 12)


def test_harmonic_exact():
    for m in (1, 5, 40):
        assert harmonic(m) == pytest.approx(float(sum(Fraction(1, k) for k in range(1, m + 1))),
                                            rel=1e-15)
    assert harmonic(20_000) == pytest.approx(math.fsum(1 / k for k in range(1, 20_001)), rel=1e-13)


def test_harmonic_vs_log():
    for m in range(1, 10_001):
        assert abs(harmonic(m) - (math.log(m) + 0.5772156649015329)) < 1 / (2 * m)


def test_log_approximation_flag(exp1):
    assert expected_iteration_runtime(8, exp1, approx_log=True) == pytest.approx(math.log(8))


@pytest.mark.parametrize("model", [RuntimeModel.exponential(2.0, overhead=0.1),
                                   RuntimeModel.shifted_exponential(1.0, 0.5),
                                   RuntimeModel.deterministic(0.7, overhead=0.2)])
def test_monte_carlo_maxima(model):
    rng = np.random.default_rng(11)
    for m in (1, 3, 10):
        sim = model.sample(m, rng, size=100_000).mean()
        assert sim == pytest.approx(model.expected(m), rel=0.01)


def test_increasing_in_m(exp1):
    vals = [exp1.expected(m) for m in range(1, 200)]
    assert np.all(np.diff(vals) > 0)


def test_rejects_zero_workers(exp1):
    with pytest.raises(ValueError):
        exp1.expected(0)


class TestPreemptionCompletion:
    def test_no_preemption(self, exp1):
        assert expected_completion_time_preemption(50, 4, 0.0, exp1) == pytest.approx(50 * 25 / 12)

    def test_single_worker_half(self):
        assert expected_completion_time_preemption(10, 1, 0.5, RuntimeModel.deterministic(1.0)) \
            == pytest.approx(20.0)

    def test_diverges_as_q_to_one(self, exp1):
        qs = np.linspace(0.0, 0.999, 60)
        det = RuntimeModel.deterministic(1.0)
        for model, n in ((det, 4), (exp1, 1)):
            vals = [expected_completion_time_preemption(10, n, q, model) for q in qs]
            assert np.all(np.diff(vals) > 0)
            assert vals[-1] > 1000
        # with stragglers fewer survivors also shorten each iteration, so the curve first dips
        vals = [expected_completion_time_preemption(10, 2, q, exp1) for q in qs]
        assert vals[5] < vals[0]
        assert np.all(np.diff(vals[30:]) > 0) and vals[-1] > 1000

    def test_q_one_rejected(self, exp1):
        with pytest.raises(ValueError):
            expected_completion_time_preemption(10, 2, 1.0, exp1)

    def test_conditional_mean(self):
        # n = 2, q = 0.5: y | y > 0 is 1 w.p. 2/3, 2 w.p. 1/3
        assert binomial_active_mean(2, 0.5) == pytest.approx(4 / 3)


def test_config_round_trip():
    from spotsgd.convergence import read_flat_config

    m = RuntimeModel.shifted_exponential(2.5, 0.25, overhead=0.1)
    assert RuntimeModel.from_mapping(read_flat_config(m.to_config())) == m
    with pytest.raises(ValueError):
        RuntimeModel(family="weibull")
