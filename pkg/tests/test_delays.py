import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from delayts.delays import (
    EXPONENTIAL,
    Exponential,
    ExponentialMixture,
    NoDelay,
    Weibull,
    law_from_dict,
)


def test_exponential_cdf_limits():
    e = np.array([0.0, 1.0, 1e6])
    f = EXPONENTIAL.cdf(e, 0.01)
    assert f[0] == 0.0
    assert f[1] == pytest.approx(1 - math.exp(-0.01))
    assert f[2] == 1.0


@given(lam=st.floats(1e-6, 1e3), a=st.floats(0, 1e4), b=st.floats(0, 1e4))
def test_exponential_cdf_monotone_and_complementary(lam, a, b):
    lo, hi = sorted((a, b))
    assert EXPONENTIAL.cdf(lo, lam) <= EXPONENTIAL.cdf(hi, lam)
    f, s = EXPONENTIAL.cdf_sf(np.array([a]), lam)
    assert f[0] + s[0] == pytest.approx(1.0, abs=1e-15)


def test_m_step_reciprocal_mean():
    d = np.array([1.0, 2.0, 3.0])
    assert EXPONENTIAL.m_step(3, 6.0, d, np.array([]), np.array([])) == 0.5


def test_m_step_zero_exposure_is_nan():
    assert math.isnan(EXPONENTIAL.m_step(1, 0.0, np.array([0.0]), np.array([0.0]), np.array([1.0])))


@pytest.mark.parametrize(
    "law,mean",
    [
        (Exponential(1 / 500), 500.0),
        (Weibull(1.5, 1000.0), 1000 * math.gamma(1 + 1 / 1.5)),
        (ExponentialMixture.with_mean(7.4), 7.4),
    ],
)
def test_sample_mean_within_3se(law, mean):
    x = law.sample(np.random.default_rng(1), 20000)
    se = x.std(ddof=1) / math.sqrt(len(x))
    assert abs(x.mean() - mean) < 3 * se
    assert law.mean == pytest.approx(mean)


def test_weibull_mean_value():
    # 1000 * Gamma(5/3)
    assert Weibull(1.5, 1000).mean == pytest.approx(902.745, abs=1e-3)


@pytest.mark.parametrize("law", [Exponential(0.01), Weibull(1.5, 100), ExponentialMixture.with_mean(5.0)])
def test_cdf_matches_empirical(law):
    x = law.sample(np.random.default_rng(2), 50000)
    for q in (1.0, 10.0, 100.0):
        emp = np.mean(x <= q)
        assert abs(emp - float(law.cdf(q))) < 4 * math.sqrt(0.25 / len(x))


def test_no_delay():
    law = NoDelay()
    assert law.sample(np.random.default_rng(0), 3).tolist() == [0, 0, 0]
    assert law.cdf(0.0) == 1.0


@pytest.mark.parametrize("law", [Exponential(0.5), Weibull(1.5, 2.0), ExponentialMixture.with_mean(3.0), NoDelay()])
def test_law_dict_round_trip(law):
    assert law_from_dict(law.to_dict()) == law


@pytest.mark.parametrize(
    "d",
    [
        {"law": "gamma", "shape": 1},
        {"law": "exponential"},
        {"law": "exponential", "rate": 1, "scale": 2},
        {"law": "exponential", "rate": -1},
    ],
)
def test_law_from_dict_rejects(d):
    with pytest.raises(ValueError):
        law_from_dict(d)


def test_mixture_validation():
    with pytest.raises(ValueError):
        ExponentialMixture((0.5, 0.6), (1.0, 2.0))
    with pytest.raises(ValueError):
        ExponentialMixture.with_mean(0.01, fast_weight=0.5, fast_mean=1.0)
