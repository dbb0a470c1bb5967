import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from poisson_polymer.core import RandomStream
from poisson_polymer.errors import DomainError
from poisson_polymer.stats import (EstimatorResult, SampleSet, chi_square_poisson, kendall_tau, ks_critical,
                                   ks_two_sample, mean_stderr, moment_compare, trend_test)


def test_mean_stderr_examples():
    r = mean_stderr([1, 1, 1, 1])
    assert (r.value, r.stderr, r.n) == (1.0, 0.0, 4)
    r = mean_stderr([0, 2])
    assert r.value == 1.0 and r.stderr == pytest.approx(1.0)
    with pytest.raises(DomainError):
        mean_stderr([1.0])


def test_mean_stderr_gaussian():
    r = mean_stderr(RandomStream(0).generator().standard_normal(100_000))
    assert abs(r.value) < 3 * 0.00316
    assert r.stderr == pytest.approx(0.00316, rel=0.02)


def test_duplicated_samples_shrink_stderr_by_sqrt2():
    v = RandomStream(1).generator().standard_normal(500)
    a = mean_stderr(v).stderr
    b = mean_stderr(np.concatenate([v, v])).stderr
    # ddof correction: sqrt((2n - 2) / (2n - 1)) relative to a / sqrt(2)
    n = v.size
    assert b == pytest.approx(a / math.sqrt(2) * math.sqrt((n - 1) * 2 * n / (n * (2 * n - 1))), rel=1e-12)


def test_estimator_pooled_and_scaled():
    a = EstimatorResult(1.0, 0.1, 10)
    b = EstimatorResult(2.0, 0.2, 30)
    p = EstimatorResult.pooled([a, b])
    assert p.value == pytest.approx(1.75)
    assert p.stderr == pytest.approx(math.sqrt((10 * 0.1) ** 2 + (30 * 0.2) ** 2) / 40)
    s = a.scaled(-2.0)
    assert (s.value, s.stderr) == (-2.0, 0.2)
    with pytest.raises(DomainError):
        EstimatorResult(0.0, -1.0, 2)


def test_sample_set_validation():
    with pytest.raises(DomainError):
        SampleSet([1.0])
    with pytest.raises(DomainError):
        SampleSet([1.0, float("nan")])
    with pytest.raises(DomainError):
        SampleSet([1.0, 2.0], inner_stderr=[0.1])
    assert len(SampleSet([1.0, 2.0, 3.0], inner_stderr=[0, 0, 0])) == 3


def test_ks_identical_and_symmetric():
    g = RandomStream(2).generator()
    a, b = g.random(200), g.random(300)
    assert ks_two_sample(a, a) == 0.0
    assert ks_two_sample(a, b) == ks_two_sample(b, a)
    with pytest.raises(DomainError):
        ks_two_sample(a[:10], b)


def test_ks_shifted_uniforms():
    g = RandomStream(3).generator()
    d = ks_two_sample(g.random(10_000), g.random(10_000) + 0.5)
    assert abs(d - 0.5) < 0.02


def test_ks_independent_uniforms_below_critical():
    g = RandomStream(4).generator()
    d = ks_two_sample(g.random(10_000), g.random(10_000))
    assert d < 1.63 * math.sqrt(2 / 10_000)
    assert ks_critical(10_000, 10_000) == pytest.approx(1.6276 * math.sqrt(2 / 10_000), rel=1e-3)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 10), st.floats(-5, 5))
def test_ks_invariant_under_monotone_maps(seed, scale, shift):
    g = RandomStream(seed).generator()
    a, b = g.standard_normal(80), 0.3 + g.standard_normal(60)
    d = ks_two_sample(a, b)
    assert ks_two_sample(scale * a + shift, scale * b + shift) == d
    assert ks_two_sample(np.exp(a), np.exp(b)) == d


def test_moment_compare_examples():
    assert moment_compare(np.ones(200), 1.0, 2).z == 0.0
    g = RandomStream(5).generator()
    assert abs(moment_compare(g.standard_normal(5000), 1.0, 2, stream=RandomStream(6)).z) < 3
    assert abs(moment_compare(g.exponential(1.0, 5000), 1.0, 1, stream=RandomStream(7)).z) < 3
    with pytest.raises(DomainError):
        moment_compare(np.ones(200), 1.0, 5)
    with pytest.raises(DomainError):
        moment_compare(np.ones(50), 1.0, 1)


def test_moment_compare_is_seeded():
    v = RandomStream(8).generator().exponential(1.0, 1000)
    assert moment_compare(v, 2.0, 2, stream=RandomStream(9)) == moment_compare(v, 2.0, 2, stream=RandomStream(9))


def test_bootstrap_stderr_stable_in_resamples():
    v = RandomStream(10).generator().standard_normal(2000)
    a = moment_compare(v, 1.0, 2, n_boot=1000, stream=RandomStream(11)).stderr
    b = moment_compare(v, 1.0, 2, n_boot=2000, stream=RandomStream(11)).stderr
    assert abs(b - a) / a < 0.05


def test_trend_examples():
    r = trend_test([3, 2, 1])
    assert r.tau == -1.0 and r.verdict == "decreasing"
    r = trend_test([1, 2, 3])
    assert r.tau == 1.0 and r.verdict == "not-decreasing"
    r = trend_test([0.30, 0.18, 0.21, 0.09])
    assert r.tau == pytest.approx(-0.6666666666666666) and r.verdict == "decreasing"
    with pytest.raises(DomainError):
        trend_test([1, 2])


@given(st.lists(st.floats(-100, 100), min_size=3, max_size=12, unique=True))
def test_kendall_tau_matches_scipy(values):
    from scipy.stats import kendalltau
    want = kendalltau(np.arange(len(values)), values).statistic
    assert kendall_tau(values) == pytest.approx(want, abs=1e-12)


def test_chi_square_accepts_poisson_and_rejects_shifted():
    g = RandomStream(12).generator()
    good = chi_square_poisson(g.poisson(6.0, 10_000), 6.0)
    assert good.p_value > 0.01 and good.dof > 5
    bad = chi_square_poisson(g.poisson(6.5, 10_000), 6.0)
    assert bad.p_value < 1e-6


def test_chi_square_degenerate_mean():
    r = chi_square_poisson(np.zeros(100, dtype=int), 0.01)
    assert r.dof == 0 and r.p_value == 1.0
