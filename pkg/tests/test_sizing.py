import math
from statistics import NormalDist

import pytest
from hypothesis import given
from hypothesis import strategies as st

from abtest_sizing.errors import DomainError, InfeasibleDesignError
from abtest_sizing.sizing import (
    MIN_RECOMMENDED_F,
    DesignParams,
    allocate_unbalanced,
    ate_from_mod,
    mod_from_ate,
    mod_ratio,
    power_unbalanced,
    rel_abs_ratio,
    size_iid_binary,
    size_iid_continuous,
    size_relative_iid,
)

Z = NormalDist()


def oracle_c(alpha=0.05, power=0.8):
    return (Z.inv_cdf(1 - alpha / 2) + Z.inv_cdf(power)) ** 2


def oracle_binary(p_x, delta, alpha=0.05, power=0.8):
    pool = p_x + delta / 2
    return math.ceil(2 * pool * (1 - pool) * oracle_c(alpha, power) / delta**2)


def oracle_relative_binary(p_x, rel, alpha=0.05, power=0.8):
    p_y = (1 + rel) * p_x
    pool = (p_x + p_y) / 2
    factor = 1 / p_x**2 + p_y**2 / p_x**4
    return math.ceil(factor * pool * (1 - pool) * oracle_c(alpha, power) / rel**2)


class TestDesignParams:
    def test_defaults(self):
        d = DesignParams()
        assert d.z_alpha == pytest.approx(1.959963985, abs=1e-9)
        assert d.z_beta == pytest.approx(0.841621234, abs=1e-9)
        assert d.z_sum_sq == pytest.approx(7.848879734, abs=1e-8)

    def test_one_sided(self):
        assert DesignParams(sides="one").z_alpha == pytest.approx(Z.inv_cdf(0.95), abs=1e-9)

    @pytest.mark.parametrize("kw", [{"alpha": 0}, {"alpha": 1}, {"power": 1.0}, {"sides": "both"}])
    def test_invalid(self, kw):
        with pytest.raises(DomainError):
            DesignParams(**kw)


class TestIidSizing:
    def test_continuous_example(self):
        r = size_iid_continuous(1.0, 0.2)
        assert r.n_per_arm == 393
        assert r.unit_kind == "analysis_unit"
        # the 16 sigma^2 / delta^2 rule of thumb is a slight overestimate
        assert r.n_per_arm < 16 * 1.0 / 0.2**2 == pytest.approx(400)

    @pytest.mark.parametrize(
        "p_x, delta, expected",
        [(13 / 21, 0.05, 1440), (0.619, 0.05, 1440), (0.6, 0.05, 1472), (0.8, 0.02, 6040)],
    )
    def test_binary_examples(self, p_x, delta, expected):
        assert size_iid_binary(p_x, delta).n_per_arm == expected

    @pytest.mark.parametrize("p_x", [0.05, 0.2, 0.5, 0.73, 0.9])
    @pytest.mark.parametrize("delta", [0.01, 0.03, -0.04])
    @pytest.mark.parametrize("power", [0.8, 0.9])
    def test_binary_matches_oracle(self, p_x, delta, power):
        d = DesignParams(power=power)
        assert size_iid_binary(p_x, delta, d).n_per_arm == oracle_binary(p_x, delta, power=power)

    def test_infeasible_rate(self):
        with pytest.raises(InfeasibleDesignError):
            size_iid_binary(0.98, 0.05)

    @pytest.mark.parametrize("sigma2, delta", [(0.0, 0.1), (-1.0, 0.1), (1.0, 0.0), (1.0, math.nan)])
    def test_domain(self, sigma2, delta):
        with pytest.raises(DomainError):
            size_iid_continuous(sigma2, delta)

    @given(st.floats(0.01, 10), st.floats(0.01, 1), st.floats(1.01, 3))
    def test_monotone_in_delta_and_variance(self, sigma2, delta, factor):
        n = size_iid_continuous(sigma2, delta).raw_n
        assert size_iid_continuous(sigma2, delta * factor).raw_n < n
        assert size_iid_continuous(sigma2 * factor, delta).raw_n > n

    def test_monotone_in_power(self):
        ns = [size_iid_continuous(1.0, 0.1, DesignParams(power=p)).n_per_arm
              for p in (0.6, 0.7, 0.8, 0.9, 0.95)]
        assert ns == sorted(ns)

    def test_to_dict(self):
        d = size_iid_continuous(1.0, 0.2).to_dict()
        assert d["n_per_arm"] == 393
        assert d["design"] == {"alpha": 0.05, "power": 0.8, "sides": "two"}

    @given(st.floats(0.01, 5), st.floats(0.005, 0.5))
    def test_implied_mod_is_critical_at_raw_n(self, sigma2, delta):
        r = size_iid_continuous(sigma2, delta)
        se = math.sqrt(2 * sigma2 / r.raw_n)
        assert r.implied_mod / se == pytest.approx(r.z_alpha, rel=1e-6)


RELATIVE_SIZED = [
    (0.1, 0.01, 1433336), (0.1, 0.05, 60725), (0.1, 0.10, 16301), (0.1, 0.20, 4688),
    (0.6, 0.01, 105436), (0.6, 0.05, 4342), (0.6, 0.10, 1124), (0.6, 0.20, 299),
]
ABSOLUTE_SIZED = [
    (0.1, 0.01, 1419074), (0.1, 0.05, 57764), (0.1, 0.10, 14752), (0.1, 0.20, 3843),
    (0.6, 0.01, 104387), (0.6, 0.05, 4130), (0.6, 0.10, 1017), (0.6, 0.20, 245),
]


class TestRelativeSizing:
    @pytest.mark.parametrize("p_x, rel, expected", RELATIVE_SIZED)
    def test_relative_sizes(self, p_x, rel, expected):
        assert size_relative_iid(p_x, rel, binary=True).n_per_arm == expected
        assert oracle_relative_binary(p_x, rel) == expected

    @pytest.mark.parametrize("p_x, rel, expected", ABSOLUTE_SIZED)
    def test_absolute_sized_sizes(self, p_x, rel, expected):
        assert size_iid_binary(p_x, rel * p_x).n_per_arm == expected

    def test_continuous_relative(self):
        r = size_relative_iid(2.0, 0.1, sigma2=1.5)
        raw = (1 / 4 + 2.2**2 / 16) * 1.5 * oracle_c() / 0.01
        assert r.raw_n == pytest.approx(raw)
        assert r.lift_kind == "relative"

    def test_argument_errors(self):
        with pytest.raises(DomainError):
            size_relative_iid(0.0, 0.1, sigma2=1.0)
        with pytest.raises(DomainError):
            size_relative_iid(1.0, 0.1)
        with pytest.raises(DomainError):
            size_relative_iid(0.5, 0.1, sigma2=1.0, binary=True)
        with pytest.raises(InfeasibleDesignError):
            size_relative_iid(0.9, 0.2, binary=True)

    @pytest.mark.parametrize("rel, expected", [(0.01, 1.01005), (0.10, 1.105), (0.20, 1.22),
                                               (-0.01, 0.99005), (-0.10, 0.905), (-0.20, 0.82)])
    def test_ratio_values(self, rel, expected):
        assert rel_abs_ratio(rel) == pytest.approx(expected)

    @given(st.floats(0.1, 50), st.floats(0.1, 10), st.floats(-0.5, 0.5).filter(lambda r: abs(r) > 1e-3))
    def test_ratio_law_free_of_baseline(self, mu_x, sigma2, rel):
        n_rel = size_relative_iid(mu_x, rel, sigma2=sigma2).raw_n
        n_abs = size_iid_continuous(sigma2, rel * mu_x).raw_n
        assert n_rel / n_abs == pytest.approx(rel_abs_ratio(rel), rel=1e-12)

    def test_ratio_domain(self):
        with pytest.raises(DomainError):
            rel_abs_ratio(-1.0)


class TestMod:
    @pytest.mark.parametrize("power, expected", [(0.8, 0.69959), (0.9, 0.60464)])
    def test_ratio(self, power, expected):
        assert mod_ratio(DesignParams(power=power)) == pytest.approx(expected, abs=1e-5)

    def test_example(self):
        assert round(mod_from_ate(0.02), 3) == 0.014

    @given(st.floats(-1, 1).filter(lambda x: abs(x) > 1e-6), st.floats(0.55, 0.99))
    def test_roundtrip(self, ate, power):
        d = DesignParams(power=power)
        assert ate_from_mod(mod_from_ate(ate, d), d) == pytest.approx(ate, rel=1e-12)

    def test_ratio_independent_of_baseline(self):
        mods = {size_iid_binary(p, 0.03).implied_mod for p in (0.1, 0.4, 0.7)}
        assert len(mods) == 1

    def test_zero(self):
        with pytest.raises(DomainError):
            mod_from_ate(0.0)


class TestAllocation:
    @pytest.mark.parametrize(
        "f, duration, total",
        [(1 / 3, 0.75, 1.125), (0.2, 0.625, 1.5625), (0.1, 5 / 9, 25 / 9)],
    )
    def test_tradeoff_rows(self, f, duration, total):
        r = allocate_unbalanced(f, 0.05, 0.23)
        assert r.duration_ratio_vs_balanced == pytest.approx(duration, rel=1e-12)
        assert r.total_ratio_vs_balanced == pytest.approx(total, rel=1e-12)

    def test_balanced_reproduces_iid(self):
        r = allocate_unbalanced(0.5, 0.05, 0.23)
        n = size_iid_continuous(0.23, 0.05).n_per_arm
        assert r.n_treat == r.n_control == n
        assert r.duration_ratio_vs_balanced == 1.0 == r.total_ratio_vs_balanced

    @pytest.mark.parametrize("f", [0.1, 0.2, 1 / 3, 0.45, 0.5])
    def test_power_kept(self, f):
        assert allocate_unbalanced(f, 0.05, 0.23).achieved_power >= 0.8 - 1e-9

    def test_warning_below_recommended(self):
        assert allocate_unbalanced(MIN_RECOMMENDED_F, 0.05, 0.23).warning is None
        assert "below" in allocate_unbalanced(0.1, 0.05, 0.23).warning

    @pytest.mark.parametrize("f", [0.0, 0.6, 1.0])
    def test_domain(self, f):
        with pytest.raises(DomainError):
            allocate_unbalanced(f, 0.05, 0.23)

    def test_power_peaks_at_balance(self):
        grid = [i / 1000 for i in range(1, 1000)]
        powers = [power_unbalanced(2000, f, 0.05, 0.23) for f in grid]
        assert grid[powers.index(max(powers))] == 0.5

    def test_power_matches_oracle(self):
        z = Z.inv_cdf(0.975)
        expected = 1 - Z.cdf(z - 0.05 * math.sqrt(3000 * 0.3 * 0.7 / 0.23))
        assert power_unbalanced(3000, 0.3, 0.05, 0.23) == pytest.approx(expected, rel=1e-12)

    def test_balanced_power_at_design_n_is_nominal(self):
        n = size_iid_continuous(0.23, 0.05).raw_n
        assert power_unbalanced(2 * n, 0.5, 0.05, 0.23) == pytest.approx(0.8, abs=1e-9)
