"""Delta-method machinery for metrics measured per session but randomized per user.

A user contributes ``N_i`` sessions with metric total ``S_i``; the arm metric
is the ratio sum(S) / sum(N). Its variance is driven by the joint moments of
(S, N) through the kernel ``h``, which replaces sigma^2 in the sizing
formulas and yields a count of randomization units (users) rather than
sessions.

Moments are always plug-in sample estimates (n - 1 denominators) from
historical data. ``h`` depends on the observation window used to build the
aggregates, so sizing results carry that window along.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence, Union

import numpy as np

from .errors import DomainError, InsufficientDataError
from .sizing import DEFAULT_DESIGN, DesignParams, SizingResult, _check_lift, _result, relative_lift_factor
from .stats_core import normal_quantile

__all__ = [
    "ClusterMoments",
    "ClusterSample",
    "DeltaTestResult",
    "HValue",
    "MeanSource",
    "UserAggregate",
    "cluster_moments",
    "compute_h",
    "delta_h_binary",
    "delta_ttest",
    "delta_variance",
    "metric_ratio",
    "naive_session_ztest",
    "propagate_moments_binary",
    "propagate_moments_continuous",
    "size_clustered",
    "size_clustered_relative",
]


@dataclass(frozen=True)
class UserAggregate:
    user_id: str
    n_sessions: int
    metric_sum: float


@dataclass(frozen=True, eq=False)
class ClusterSample:
    """Column form of a list of user aggregates; what the simulation produces."""

    n_sessions: np.ndarray
    metric_sum: np.ndarray

    def __len__(self) -> int:
        return int(self.n_sessions.size)

    @classmethod
    def from_aggregates(cls, aggregates: Iterable[UserAggregate]) -> "ClusterSample":
        aggs = list(aggregates)
        return cls(
            np.fromiter((a.n_sessions for a in aggs), dtype=float, count=len(aggs)),
            np.fromiter((a.metric_sum for a in aggs), dtype=float, count=len(aggs)),
        )

    def to_aggregates(self, prefix: str = "u") -> list[UserAggregate]:
        return [
            UserAggregate(f"{prefix}{i}", int(n), float(s))
            for i, (n, s) in enumerate(zip(self.n_sessions, self.metric_sum))
        ]


Aggregates = Union[ClusterSample, Sequence[UserAggregate]]


def _columns(data: Aggregates) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(data, ClusterSample):
        return data.n_sessions, data.metric_sum
    sample = ClusterSample.from_aggregates(data)
    return sample.n_sessions, sample.metric_sum


@dataclass(frozen=True)
class ClusterMoments:
    k: int
    mu_N: float
    mu_S: float
    var_N: float
    var_S: float
    cov_SN: float

    def __post_init__(self):
        if self.k < 2:
            raise InsufficientDataError(f"need at least 2 users, got k={self.k}")
        if self.var_N < 0 or self.var_S < 0:
            raise DomainError("variances must be nonnegative")
        bound = math.sqrt(self.var_S * self.var_N)
        if abs(self.cov_SN) > bound * (1 + 1e-9) + 1e-12:
            raise DomainError(
                f"|cov_SN|={abs(self.cov_SN):.6g} violates Cauchy-Schwarz bound {bound:.6g}"
            )

    @property
    def ratio(self) -> float:
        """mu_S / mu_N, the per-session mean."""
        return self.mu_S / self.mu_N


@dataclass(frozen=True)
class HValue:
    h: float
    source: ClusterMoments


@dataclass(frozen=True)
class DeltaTestResult:
    estimate: float
    std_error: float
    t_stat: float
    significant: bool
    lift_kind: str = "absolute"


class MeanSource(str, Enum):
    """Where the control mean in the relative-lift standard error comes from."""

    SAMPLE = "sample"
    FIXED_EXTERNAL = "fixed_external"  # e.g. a large historical sample
    TRUE_KNOWN = "true_known"


def metric_ratio(aggregates: Aggregates) -> float:
    """Session-level metric sum(S_i) / sum(N_i)."""
    n, s = _columns(aggregates)
    if n.size == 0:
        raise InsufficientDataError("no users")
    total = n.sum()
    if not total > 0:
        raise InsufficientDataError("no sessions")
    return float(s.sum() / total)


def _moments(n: np.ndarray, s: np.ndarray) -> ClusterMoments:
    k = n.size
    if k < 2:
        raise InsufficientDataError(f"need at least 2 users, got k={k}")
    mu_n = n.mean()
    mu_s = s.mean()
    dn = n - mu_n
    ds = s - mu_s
    return ClusterMoments(
        k=int(k),
        mu_N=float(mu_n),
        mu_S=float(mu_s),
        var_N=float(dn @ dn / (k - 1)),
        var_S=float(ds @ ds / (k - 1)),
        cov_SN=float(ds @ dn / (k - 1)),
    )


def cluster_moments(aggregates: Aggregates) -> ClusterMoments:
    """Means, variances and covariance of (N_i, S_i) across users."""
    return _moments(*_columns(aggregates))


def _h_kernel(m: ClusterMoments) -> float:
    if not m.mu_N > 0:
        raise DomainError(f"mu_N must be positive, got {m.mu_N!r}")
    r = m.mu_S / m.mu_N
    quad = m.var_S - 2.0 * r * m.cov_SN + r * r * m.var_N
    h = quad / m.mu_N**2
    if h < 0:
        # cancellation noise relative to the terms of the quadratic form
        scale = (m.var_S + 2.0 * abs(r * m.cov_SN) + r * r * m.var_N) / m.mu_N**2
        if h < -1e-12 * max(1.0, scale):
            raise DomainError(f"h={h:.3g} is negative; moments are internally inconsistent")
        h = 0.0
    return h


def compute_h(m: ClusterMoments) -> HValue:
    """h = (var_S - 2 r cov_SN + r^2 var_N) / mu_N^2 with r = mu_S / mu_N.

    Equivalently Var(S - r N) / mu_N^2, so it is nonnegative for any valid
    moments; tiny negatives from rounding are clamped to zero.
    """
    return HValue(_h_kernel(m), m)


def delta_variance(m: ClusterMoments, k: int) -> float:
    """Approximate Var(sum S / sum N) for an arm of ``k`` users: h / k."""
    if k < 1:
        raise DomainError(f"k must be positive, got {k!r}")
    return _h_kernel(m) / k


def _h_of(h: HValue | float) -> float:
    value = h.h if isinstance(h, HValue) else float(h)
    if not value > 0:
        raise DomainError(f"h must be positive to size a design, got {value!r}")
    return value


def size_clustered(h: HValue | float, delta: float, design: DesignParams = DEFAULT_DESIGN,
                   window_days: int | None = None) -> SizingResult:
    """Users per arm: k = 2 h (z_a + z_b)^2 / delta^2."""
    hv = _h_of(h)
    delta = _check_lift(delta)
    raw = 2.0 * hv * design.z_sum_sq / delta**2
    return _result(raw, delta, design, unit_kind="randomization_unit",
                   window_days=window_days, h=hv, delta=delta)


def size_clustered_relative(h: HValue | float, baseline: float, delta_rel: float,
                            design: DesignParams = DEFAULT_DESIGN,
                            window_days: int | None = None) -> SizingResult:
    """Users per arm to detect a relative lift on a ratio metric with control mean ``baseline``.

    For binary session metrics the baseline is the session rate p_x and the
    treatment rate (1 + delta_rel) p_x must stay inside (0, 1).
    """
    hv = _h_of(h)
    if isinstance(baseline, ClusterMoments):
        baseline = baseline.ratio
    baseline = float(baseline)
    if baseline == 0 or not math.isfinite(baseline):
        raise DomainError("relative lift is undefined for a zero baseline")
    delta_rel = _check_lift(delta_rel, "delta_rel")
    raw = relative_lift_factor(baseline, delta_rel) * hv * design.z_sum_sq / delta_rel**2
    return _result(raw, delta_rel, design, unit_kind="randomization_unit",
                   lift_kind="relative", window_days=window_days,
                   h=hv, baseline=baseline, delta_rel=delta_rel)


def propagate_moments_continuous(m: ClusterMoments, delta: float) -> ClusterMoments:
    """Treatment-arm moments under a constant per-session shift ``delta``.

    Session counts are untouched; mu_S gains delta mu_N, cov_SN gains
    delta var_N and var_S gains 2 delta cov_SN + delta^2 var_N. The
    resulting h equals the control h.
    """
    return replace(
        m,
        mu_S=m.mu_S + delta * m.mu_N,
        cov_SN=m.cov_SN + delta * m.var_N,
        var_S=m.var_S + 2.0 * delta * m.cov_SN + delta**2 * m.var_N,
    )


def _binary_extra_var_s(m: ClusterMoments, delta: float) -> float:
    # E[N (p + d)(1 - p - d)] - E[N p (1 - p)]
    return delta * (1.0 - delta) * m.mu_N - 2.0 * delta * m.mu_S


def propagate_moments_binary(m: ClusterMoments, delta: float) -> ClusterMoments:
    """As the continuous update, plus the Bernoulli variance change in var_S."""
    out = propagate_moments_continuous(m, delta)
    return replace(out, var_S=out.var_S + _binary_extra_var_s(m, delta))


def delta_h_binary(m: ClusterMoments, delta: float) -> float:
    """h(treatment) - h(control) for binary sessions: delta((1 - delta) mu_N - 2 mu_S) / mu_N^2."""
    if not m.mu_N > 0:
        raise DomainError(f"mu_N must be positive, got {m.mu_N!r}")
    return delta * ((1.0 - delta) * m.mu_N - 2.0 * m.mu_S) / m.mu_N**2


def delta_ttest(control: Aggregates, treatment: Aggregates, alpha: float = 0.05,
                lift_kind: str = "absolute",
                mean_source: MeanSource | str = MeanSource.SAMPLE,
                external_mean: float | None = None) -> DeltaTestResult:
    """Two-sided Delta-method test between two arms of user aggregates.

    Absolute lift uses Var = h_T/k_T + h_C/k_C. Relative lift (Y - X)/X uses
    Var(Y)/mu_x^2 + Y^2 Var(X)/mu_x^4, where mu_x is the sample control mean
    unless ``mean_source`` names an externally supplied value.
    """
    nc, sc = _columns(control)
    nt, st = _columns(treatment)
    mc = _moments(nc, sc)
    mt = _moments(nt, st)
    x = float(sc.sum() / nc.sum())
    y = float(st.sum() / nt.sum())
    var_x = _h_kernel(mc) / mc.k
    var_y = _h_kernel(mt) / mt.k
    if lift_kind == "absolute":
        estimate = y - x
        se = math.sqrt(var_x + var_y)
    elif lift_kind == "relative":
        if x == 0:
            raise DomainError("control mean is zero; relative lift is degenerate")
        estimate = (y - x) / x
        mean_source = MeanSource(mean_source)
        if mean_source is MeanSource.SAMPLE:
            mu_x = x
        else:
            if external_mean is None or external_mean == 0:
                raise DomainError(f"mean_source={mean_source.value} needs a nonzero external_mean")
            mu_x = float(external_mean)
        se = math.sqrt(var_y / mu_x**2 + y**2 * var_x / mu_x**4)
    else:
        raise DomainError(f"lift_kind must be 'absolute' or 'relative', got {lift_kind!r}")
    return _decide(estimate, se, alpha, lift_kind)


def _decide(estimate: float, se: float, alpha: float, lift_kind: str) -> DeltaTestResult:
    crit = normal_quantile(1.0 - alpha / 2)
    if se > 0:
        t = estimate / se
    else:
        t = 0.0 if estimate == 0 else math.copysign(math.inf, estimate)
    return DeltaTestResult(estimate, se, t, abs(t) > crit, lift_kind)


def naive_session_ztest(control: Aggregates, treatment: Aggregates,
                        alpha: float = 0.05) -> DeltaTestResult:
    """Two-proportion z-test that treats every session as independent.

    This is the analysis implied by the standard i.i.d. design; it ignores
    within-user correlation and so understates the variance. Binary session
    metrics only.
    """
    nc, sc = _columns(control)
    nt, st = _columns(treatment)
    n_x, n_y = float(nc.sum()), float(nt.sum())
    if not (n_x > 0 and n_y > 0):
        raise InsufficientDataError("both arms need sessions")
    x = float(sc.sum()) / n_x
    y = float(st.sum()) / n_y
    se = math.sqrt(x * (1 - x) / n_x + y * (1 - y) / n_y)
    return _decide(y - x, se, alpha, "absolute")
