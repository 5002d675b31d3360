import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abtest_sizing.errors import DomainError, InsufficientDataError, ShapeError
from abtest_sizing.stats_core import (
    RngStream,
    check_probability,
    normal_cdf,
    normal_pdf,
    normal_quantile,
    sample_bernoulli,
    sample_cov,
    sample_mean_var,
    sample_poisson,
    sample_truncated_normal,
    sample_uniform,
)

mpmath.mp.dps = 40


def mp_cdf(x):
    return float(mpmath.ncdf(x))


def mp_quantile(p):
    return float(-mpmath.sqrt(2) * mpmath.erfinv(1 - 2 * mpmath.mpf(p)))


class TestNormalCdf:
    @pytest.mark.parametrize("x", [-8.0, -5.0, -1.96, -0.5, 0.0, 0.3, 1.0, 1.6448536, 3.0, 6.0])
    def test_matches_high_precision(self, x):
        assert normal_cdf(x) == pytest.approx(mp_cdf(x), rel=1e-13, abs=1e-300)

    def test_symmetry(self):
        for x in np.linspace(-7, 7, 57):
            assert normal_cdf(x) + normal_cdf(-x) == pytest.approx(1.0, abs=1e-15)

    def test_extreme_tails(self):
        assert normal_cdf(-40.0) == 0.0 or normal_cdf(-40.0) < 1e-300
        assert normal_cdf(40.0) == 1.0

    @pytest.mark.parametrize("x", [math.nan, math.inf, -math.inf])
    def test_non_finite_rejected(self, x):
        with pytest.raises(DomainError):
            normal_cdf(x)

    def test_pdf(self):
        assert normal_pdf(0.0) == pytest.approx(1 / math.sqrt(2 * math.pi))
        assert normal_pdf(1.5) == pytest.approx(float(mpmath.npdf(1.5)), rel=1e-14)


class TestNormalQuantile:
    @pytest.mark.parametrize(
        "p, expected",
        [(0.975, 1.959963984540054), (0.8, 0.8416212335729143), (0.9, 1.2815515655446004),
         (0.95, 1.6448536269514722), (0.5, 0.0)],
    )
    def test_reference_values(self, p, expected):
        assert normal_quantile(p) == pytest.approx(expected, abs=1e-9)

    def test_z_sum_squared_constant(self):
        c = (normal_quantile(0.975) + normal_quantile(0.8)) ** 2
        assert c == pytest.approx(7.848879734, abs=1e-8)

    def test_roundtrip_grid(self):
        grid = np.concatenate([np.logspace(-6, -1, 60), np.linspace(0.1, 0.9, 81),
                               1 - np.logspace(-1, -6, 60)])
        worst = max(abs(normal_cdf(normal_quantile(p)) - p) for p in grid)
        assert worst <= 1e-9

    @pytest.mark.parametrize("p", [1e-12, 1e-8, 1e-6, 0.01, 0.02425, 0.3, 0.77, 0.97575, 0.999999])
    def test_against_mpmath(self, p):
        assert normal_quantile(p) == pytest.approx(mp_quantile(p), abs=1e-9)

    @given(st.floats(min_value=1e-10, max_value=1 - 1e-10))
    def test_antisymmetry(self, p):
        q = normal_quantile(p)
        # 1 - p is itself rounded; the quantile's slope 1/pdf magnifies that in the tails
        tol = 1e-9 + 2.3e-16 / normal_pdf(q)
        assert q == pytest.approx(-normal_quantile(1 - p), abs=tol)

    @given(st.floats(min_value=1e-8, max_value=1 - 1e-8), st.floats(min_value=1e-8, max_value=1 - 1e-8))
    def test_monotone(self, a, b):
        if a < b:
            assert normal_quantile(a) <= normal_quantile(b)

    @pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, math.nan])
    def test_domain(self, p):
        with pytest.raises(DomainError):
            normal_quantile(p)


def test_check_probability():
    assert check_probability(0.3) == 0.3
    with pytest.raises(DomainError):
        check_probability(1.0, "power")


class TestMoments:
    def test_worked_example_columns(self):
        n = [1, 3, 5, 2, 10]
        s = [1, 3, 1, 0, 8]
        mn = sample_mean_var(n)
        ms = sample_mean_var(s)
        assert (mn.mean, mn.variance) == pytest.approx((4.2, 12.7))
        assert (ms.mean, ms.variance) == pytest.approx((2.6, 10.3))
        assert sample_cov(s, n) == pytest.approx(10.1)

    def test_matches_numpy(self):
        rng = np.random.default_rng(3)
        x, y = rng.normal(size=50), rng.normal(size=50)
        m = sample_mean_var(x)
        assert m.n == 50
        assert m.variance == pytest.approx(np.var(x, ddof=1))
        assert sample_cov(x, y) == pytest.approx(np.cov(x, y)[0, 1])

    def test_too_few(self):
        with pytest.raises(InsufficientDataError):
            sample_mean_var([1.0])
        with pytest.raises(InsufficientDataError):
            sample_cov([1.0], [2.0])

    def test_shape(self):
        with pytest.raises(ShapeError):
            sample_cov([1, 2, 3], [1, 2])


DRAWS = 1_000_000


class TestSamplers:
    @pytest.mark.parametrize("lam", [5.0, 20.0])
    def test_poisson_mean(self, lam):
        x = sample_poisson(lam, RngStream(11, 0), DRAWS)
        assert abs(x.mean() - lam) <= 5 * math.sqrt(lam / DRAWS)

    def test_poisson_domain(self):
        with pytest.raises(DomainError):
            sample_poisson(-1.0, RngStream(1))

    def test_truncated_normal(self):
        x = sample_truncated_normal(0.6, 0.175, 0.25, 0.95, RngStream(5, 1), DRAWS)
        assert x.min() >= 0.25 and x.max() <= 0.95
        assert abs(x.mean() - 0.6) <= 5 * x.std() / math.sqrt(DRAWS)

    def test_truncated_normal_scalar(self):
        v = sample_truncated_normal(0.0, 1.0, -1.0, 1.0, RngStream(5))
        assert -1.0 <= float(v) <= 1.0

    def test_truncated_normal_negligible_mass(self):
        with pytest.raises(DomainError):
            sample_truncated_normal(0.0, 1.0, 20.0, 21.0, RngStream(5), 10)

    def test_bernoulli(self):
        x = sample_bernoulli(0.6, RngStream(7, 2), DRAWS)
        assert set(np.unique(x)) <= {0, 1}
        assert abs(x.mean() - 0.6) <= 5 * math.sqrt(0.24 / DRAWS)

    def test_uniform(self):
        x = sample_uniform(0.25, 0.95, RngStream(7, 3), DRAWS)
        assert x.min() >= 0.25 and x.max() < 0.95
        assert abs(x.mean() - 0.6) <= 5 * (0.7 / math.sqrt(12)) / math.sqrt(DRAWS)


class TestRngStream:
    def test_same_key_same_sequence(self):
        a = RngStream(2024, 17).gen.random(100)
        b = RngStream(2024, 17).gen.random(100)
        assert np.array_equal(a, b)

    def test_keys_are_independent(self):
        base = RngStream(2024, 17).gen.random(100)
        assert not np.array_equal(base, RngStream(2024, 18).gen.random(100))
        assert not np.array_equal(base, RngStream(2025, 17).gen.random(100))
        assert not np.array_equal(base, RngStream(2024, 17, domain=1).gen.random(100))

    def test_order_independent(self):
        # drawing other streams first must not perturb a stream
        expected = RngStream(9, 3).gen.random(5)
        for i in range(3):
            RngStream(9, i).gen.random(1000)
        assert np.array_equal(RngStream(9, 3).gen.random(5), expected)

    def test_full_64_bit_seed(self):
        RngStream(2**64 - 1, 2**40).gen.random()

    def test_negative_rejected(self):
        with pytest.raises(DomainError):
            RngStream(-1)
