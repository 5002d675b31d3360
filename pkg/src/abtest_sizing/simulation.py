"""Deterministic Monte Carlo checks of the sizing formulas.

Every replicate draws from its own :class:`RngStream` keyed by
``(master_seed, replicate * 4 + role)`` within a domain that separates the
historical pass, null replicates and alternative replicates. Results
therefore do not depend on the number of worker threads or the order in
which replicates finish; tallies are integer sums.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Literal, Sequence

import numpy as np
from scipy.optimize import brentq

from .clustered import (
    ClusterMoments,
    ClusterSample,
    HValue,
    cluster_moments,
    compute_h,
    delta_ttest,
    naive_session_ztest,
    size_clustered,
)
from .errors import DomainError
from .sizing import DEFAULT_DESIGN, DesignParams, size_iid_binary, size_relative_iid
from .stats_core import (
    RNG_FAMILY,
    RngStream,
    check_probability,
    normal_cdf,
    normal_pdf,
    normal_quantile,
    sample_poisson,
    sample_truncated_normal,
    sample_uniform,
)

__all__ = [
    "CASES",
    "CasePlan",
    "ClusteredCase",
    "ModHistogram",
    "SimulationReport",
    "generate_clustered_arm",
    "historical_pass",
    "mc_margin",
    "plan_case",
    "population_h",
    "run_absolute_sized_relative_suite",
    "run_clustered_suite",
    "run_mod_experiment",
    "run_relative_iid_suite",
    "run_mod_grid",
    "run_undersized_scenarios",
    "scaled_session_mean",
    "truncated_poisson_moments",
]

# stream domains
HISTORICAL, NULL, ALT = 0, 1, 2
# stream roles within a replicate
CONTROL, TREATMENT, AUX, RESERVED = 0, 1, 2, 3
ROLES_PER_REPLICATE = 4

DEFAULT_REPS = 10_000
MIN_REPS = 100
LARGE_SAMPLE_N = 5000

Hypothesis = Literal["null", "alt"]


def _stream(master_seed: int, replicate: int, role: int, domain: int) -> RngStream:
    return RngStream(master_seed, replicate * ROLES_PER_REPLICATE + role, domain)


def mc_margin(reps: int, p: float) -> float:
    """Two-standard-error Monte Carlo margin, 2 sqrt(p (1 - p) / reps)."""
    if reps < 1:
        raise DomainError(f"reps must be positive, got {reps!r}")
    return 2.0 * math.sqrt(p * (1.0 - p) / reps)


@dataclass(frozen=True)
class ClusteredCase:
    """Generative model for one user-randomized simulation case.

    Users get N ~ Poisson(lam) sessions (zeros redrawn), a personal rate p_i
    spread around the arm mean, and S ~ Binomial(N, p_i) conversions. For
    ``truncated_normal`` the spread has sd half_range / 2 and is cut at the
    window arm_mean +/- half_range; ``uniform`` fills that window evenly.
    """

    name: str
    p_x: float
    delta: float
    lam: float
    p_dist: Literal["truncated_normal", "uniform"] = "truncated_normal"
    half_range: float = 0.35
    k_hist: int = 5000

    def __post_init__(self):
        check_probability(self.p_x, "p_x")
        if not self.lam > 0:
            raise DomainError(f"lam must be positive, got {self.lam!r}")
        if self.p_dist not in ("truncated_normal", "uniform"):
            raise DomainError(f"unknown p_dist {self.p_dist!r}")
        if self.half_range < 0:
            raise DomainError("half_range must be nonnegative")
        for mean in (self.p_x, self.p_x + self.delta):
            _check_window(mean, self.half_range)

    @property
    def p_y(self) -> float:
        return self.p_x + self.delta

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _check_window(mean: float, half: float) -> None:
    eps = 1e-12
    if mean - half < -eps or mean + half > 1 + eps:
        raise DomainError(f"rate window {mean} +/- {half} leaves [0, 1]")


CASES: dict[str, ClusteredCase] = {
    "I": ClusteredCase("I", 0.6, 0.05, 5, "truncated_normal", 0.35),
    "II": ClusteredCase("II", 0.6, 0.05, 20, "truncated_normal", 0.35),
    "III": ClusteredCase("III", 0.8, 0.02, 5, "truncated_normal", 0.18),
    "IV": ClusteredCase("IV", 0.5, 0.2, 5, "truncated_normal", 0.3),
    "V": ClusteredCase("V", 0.6, 0.05, 5, "uniform", 0.35),
}


def truncated_poisson_moments(lam: float) -> tuple[float, float]:
    """E[N], E[N^2] for Poisson(lam) conditioned on N >= 1."""
    keep = -math.expm1(-lam)
    return lam / keep, (lam + lam * lam) / keep


def _rate_variance(case: ClusteredCase) -> float:
    half = case.half_range
    if half == 0:
        return 0.0
    if case.p_dist == "uniform":
        return half * half / 3.0
    sigma = half / 2.0
    a = half / sigma
    mass = 2.0 * normal_cdf(a) - 1.0
    return sigma * sigma * (1.0 - 2.0 * a * normal_pdf(a) / mass)


def population_h(case: ClusteredCase, arm_mean: float | None = None,
                 lam: float | None = None) -> float:
    """Exact h of the case's generative model (no sampling).

    With m = E[p_i] and v = Var(p_i),
    h = (E[N] (m (1 - m) - v) + E[N^2] v) / E[N]^2.
    """
    m = case.p_x if arm_mean is None else arm_mean
    mu_n, en2 = truncated_poisson_moments(case.lam if lam is None else lam)
    v = _rate_variance(case)
    return (mu_n * (m * (1.0 - m) - v) + en2 * v) / mu_n**2


def _positive_poisson(lam: float, k: int, rng: RngStream) -> np.ndarray:
    n = sample_poisson(lam, rng, k)
    zero = n == 0
    while zero.any():
        n[zero] = sample_poisson(lam, rng, int(zero.sum()))
        zero = n == 0
    return n


def generate_clustered_arm(case: ClusteredCase, arm_mean: float, k: int, rng: RngStream,
                           lam: float | None = None) -> ClusterSample:
    """One arm of ``k`` users; ``lam`` overrides the case's session mean."""
    if k < 1:
        raise DomainError(f"k must be positive, got {k!r}")
    half = case.half_range
    _check_window(arm_mean, half)
    n = _positive_poisson(case.lam if lam is None else lam, k, rng)
    if half == 0:
        p = np.full(k, float(arm_mean))
    elif case.p_dist == "uniform":
        p = sample_uniform(arm_mean - half, arm_mean + half, rng, k)
    else:
        p = sample_truncated_normal(arm_mean, half / 2.0, arm_mean - half, arm_mean + half, rng, k)
    # the window may touch 0 or 1 only up to rounding
    p = np.clip(p, 0.0, 1.0)
    s = rng.gen.binomial(n, p)
    return ClusterSample(n.astype(float), s.astype(float))


def historical_pass(case: ClusteredCase, master_seed: int,
                    k: int | None = None) -> tuple[ClusterSample, ClusterMoments, HValue]:
    """Simulate pre-experiment control traffic and estimate h from it."""
    rng = RngStream(master_seed, 0, HISTORICAL)
    sample = generate_clustered_arm(case, case.p_x, case.k_hist if k is None else k, rng)
    m = cluster_moments(sample)
    return sample, m, compute_h(m)


@dataclass(frozen=True)
class CasePlan:
    """Design quantities for a case, derived from a seeded historical pass."""

    case: str
    h: float
    mu_N: float
    k: int
    sessions: float
    n_iid: int

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def plan_case(case: ClusteredCase, master_seed: int,
              design: DesignParams = DEFAULT_DESIGN) -> CasePlan:
    _, m, hv = historical_pass(case, master_seed)
    k = size_clustered(hv, case.delta, design).n_per_arm
    n_iid = size_iid_binary(case.p_x, case.delta, design).n_per_arm
    return CasePlan(case.name, hv.h, m.mu_N, k, k * m.mu_N, n_iid)


@dataclass
class SimulationReport:
    scenario_tag: str
    reps: int
    n_or_k_used: int
    empirical_alpha: float | None
    empirical_power: float | None
    mc_margin_alpha: float | None
    mc_margin_power: float | None
    master_seed: int
    rejections_null: int | None = None
    rejections_alt: int | None = None
    rng_family: str = RNG_FAMILY
    config: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def _chunks(reps: int, threads: int) -> list[range]:
    size = max(1, math.ceil(reps / (threads * 4)))
    return [range(i, min(i + size, reps)) for i in range(0, reps, size)]


def _map_replicates(fn: Callable[[int], Any], reps: int, threads: int) -> list[Any]:
    """Apply ``fn`` to every replicate index, in index order."""
    if threads <= 1:
        return [fn(r) for r in range(reps)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda chunk: [fn(r) for r in chunk], _chunks(reps, threads))
        return [x for part in parts for x in part]


def _count(fn: Callable[[int], bool], reps: int, threads: int) -> int:
    return int(sum(_map_replicates(fn, reps, threads)))


def _check_reps(reps: int) -> None:
    if reps < MIN_REPS:
        raise DomainError(f"reps must be at least {MIN_REPS}, got {reps!r}")


def _tally(tag: str, n_used: int, reps: int, master_seed: int, hypotheses: Sequence[str],
           replicate: Callable[[int, bool], bool], threads: int, design: DesignParams,
           config: dict[str, Any]) -> SimulationReport:
    _check_reps(reps)
    unknown = set(hypotheses) - {"null", "alt"}
    if unknown:
        raise DomainError(f"unknown hypotheses: {sorted(unknown)}")
    rej_null = rej_alt = None
    if "null" in hypotheses:
        rej_null = _count(lambda r: replicate(r, False), reps, threads)
    if "alt" in hypotheses:
        rej_alt = _count(lambda r: replicate(r, True), reps, threads)
    return SimulationReport(
        scenario_tag=tag,
        reps=reps,
        n_or_k_used=n_used,
        empirical_alpha=None if rej_null is None else rej_null / reps,
        empirical_power=None if rej_alt is None else rej_alt / reps,
        mc_margin_alpha=mc_margin(reps, design.alpha) if rej_null is not None else None,
        mc_margin_power=mc_margin(reps, design.power) if rej_alt is not None else None,
        master_seed=master_seed,
        rejections_null=rej_null,
        rejections_alt=rej_alt,
        config=config,
    )


def run_clustered_suite(case: ClusteredCase, k_per_arm: int, reps: int = DEFAULT_REPS, *,
                        master_seed: int, hypotheses: Sequence[Hypothesis] = ("null", "alt"),
                        analysis: Literal["delta", "naive"] = "delta",
                        lam: float | None = None, threads: int = 1,
                        design: DesignParams = DEFAULT_DESIGN,
                        tag: str | None = None) -> SimulationReport:
    """Empirical type I error and power of a user-randomized design with ``k_per_arm`` users.

    ``analysis="delta"`` applies the Delta-method test; ``"naive"`` the
    session-level z-test that ignores clustering.
    """
    if analysis == "delta":
        def test(c, t):
            return delta_ttest(c, t, design.alpha).significant
    elif analysis == "naive":
        def test(c, t):
            return naive_session_ztest(c, t, design.alpha).significant
    else:
        raise DomainError(f"unknown analysis {analysis!r}")

    def replicate(r: int, alt: bool) -> bool:
        domain = ALT if alt else NULL
        control = generate_clustered_arm(case, case.p_x, k_per_arm,
                                         _stream(master_seed, r, CONTROL, domain), lam)
        treat_mean = case.p_y if alt else case.p_x
        treatment = generate_clustered_arm(case, treat_mean, k_per_arm,
                                           _stream(master_seed, r, TREATMENT, domain), lam)
        return test(control, treatment)

    config = {"suite": "clustered", "case": case.to_dict(), "k_per_arm": k_per_arm,
              "lam": case.lam if lam is None else lam, "analysis": analysis,
              "hypotheses": list(hypotheses), "design": asdict(design)}
    return _tally(tag or f"clustered:{case.name}:k={k_per_arm}:{analysis}", k_per_arm, reps,
                  master_seed, hypotheses, replicate, threads, design, config)


def scaled_session_mean(target_mean: float) -> float:
    """Poisson parameter whose zero-truncated mean equals ``target_mean``."""
    if not target_mean > 1:
        raise DomainError(
            f"target sessions per user {target_mean:.4g} must exceed 1 (every user has a session)"
        )
    return brentq(lambda lam: lam / -math.expm1(-lam) - target_mean, 1e-9, target_mean + 1)


def run_undersized_scenarios(case: ClusteredCase, n_iid: int, k_delta: int, mu_N: float,
                             reps: int = DEFAULT_REPS, *, master_seed: int, threads: int = 1,
                             analyses: tuple[str, str] = ("naive", "delta"),
                             design: DesignParams = DEFAULT_DESIGN
                             ) -> tuple[SimulationReport, SimulationReport]:
    """Performance when only the i.i.d. session count ``n_iid`` is collected per arm.

    Scenario (i) keeps sessions per user and cuts users to ceil(n_iid / mu_N);
    scenario (ii) keeps ``k_delta`` users and lowers the session rate so the
    expected sessions per arm equal ``n_iid``. By default (i) is analysed with
    the session-level test that matches an i.i.d. design and (ii) with the
    Delta test.
    """
    k_i = math.ceil(n_iid / mu_N)
    lam_ii = scaled_session_mean(n_iid / k_delta)
    first = run_clustered_suite(case, k_i, reps, master_seed=master_seed, analysis=analyses[0],
                                threads=threads, design=design,
                                tag=f"undersized:{case.name}:(i):k={k_i}")
    second = run_clustered_suite(case, k_delta, reps, master_seed=master_seed,
                                 analysis=analyses[1], lam=lam_ii, threads=threads,
                                 design=design,
                                 tag=f"undersized:{case.name}:(ii):k={k_delta}:lam={lam_ii:.4f}")
    for rep, scen in ((first, "i"), (second, "ii")):
        rep.config.update(scenario=scen, n_iid=n_iid, k_delta=k_delta, mu_N=mu_N)
    return first, second


MeanMode = Literal["sample", "true_mean", "large_sample"]


def _relative_reject(n: int, x_count: int, y_count: int, mu_x: float, z: float) -> bool:
    x = x_count / n
    y = y_count / n
    if x == 0 or mu_x == 0:
        return False
    # unbiased Bernoulli variances, i.e. the Delta test with one session per user
    var_x = x * (1.0 - x) / (n - 1)
    var_y = y * (1.0 - y) / (n - 1)
    se = math.sqrt(var_y / mu_x**2 + y * y * var_x / mu_x**4)
    est = (y - x) / x
    if se == 0:
        return est != 0
    return abs(est / se) > z


def _relative_suite(tag: str, p_x: float, delta_rel: float, n: int, reps: int,
                    mean_mode: MeanMode, master_seed: int, threads: int,
                    design: DesignParams, sizing: str) -> SimulationReport:
    if mean_mode not in ("sample", "true_mean", "large_sample"):
        raise DomainError(f"unknown mean_mode {mean_mode!r}")
    p_y = (1.0 + delta_rel) * p_x
    z = normal_quantile(1.0 - design.alpha / 2)

    def replicate(r: int, alt: bool) -> bool:
        domain = ALT if alt else NULL
        x_count = int(_stream(master_seed, r, CONTROL, domain).gen.binomial(n, p_x))
        y_count = int(_stream(master_seed, r, TREATMENT, domain).gen.binomial(n, p_y if alt else p_x))
        if mean_mode == "sample":
            mu_x = x_count / n
        elif mean_mode == "true_mean":
            mu_x = p_x
        else:
            hist = _stream(master_seed, r, AUX, domain).gen.binomial(LARGE_SAMPLE_N, p_x)
            mu_x = hist / LARGE_SAMPLE_N
        return _relative_reject(n, x_count, y_count, mu_x, z)

    config = {"suite": sizing, "p_x": p_x, "delta_rel": delta_rel, "n": n,
              "mean_mode": mean_mode, "design": asdict(design)}
    return _tally(tag, n, reps, master_seed, ("null", "alt"), replicate, threads, design, config)


def run_relative_iid_suite(p_x: float, delta_rel: float, reps: int = DEFAULT_REPS, *,
                           master_seed: int, mean_mode: MeanMode = "sample",
                           threads: int = 1,
                           design: DesignParams = DEFAULT_DESIGN) -> SimulationReport:
    """Binary i.i.d. arms sized for a relative lift and tested on the relative scale."""
    n = size_relative_iid(p_x, delta_rel, binary=True, design=design).n_per_arm
    return _relative_suite(f"relative:{p_x}:{delta_rel}:{mean_mode}", p_x, delta_rel, n, reps,
                           mean_mode, master_seed, threads, design, "relative")


def run_absolute_sized_relative_suite(p_x: float, delta_rel: float, reps: int = DEFAULT_REPS, *,
                                      master_seed: int, threads: int = 1,
                                      design: DesignParams = DEFAULT_DESIGN) -> SimulationReport:
    """As :func:`run_relative_iid_suite` but sized by the absolute formula at delta = delta_rel p_x."""
    n = size_iid_binary(p_x, delta_rel * p_x, design).n_per_arm
    return _relative_suite(f"absolute-sized:{p_x}:{delta_rel}", p_x, delta_rel, n, reps,
                           "sample", master_seed, threads, design, "absolute_sized_relative")


@dataclass
class ModHistogram:
    observed_lifts: list[tuple[float, bool]]
    ate: float
    min_significant_lift: float | None
    p_x: float
    n_per_arm: int
    predicted_mod: float
    master_seed: int
    config: dict[str, Any] = field(default_factory=dict)

    @property
    def power(self) -> float:
        return sum(sig for _, sig in self.observed_lifts) / len(self.observed_lifts)

    def significant_fraction_below(self, threshold: float) -> float:
        """Among significant replicates, the share whose lift is below ``threshold``."""
        sig = [lift for lift, s in self.observed_lifts if s]
        if not sig:
            return 0.0
        return sum(lift < threshold for lift in sig) / len(sig)

    def summary(self) -> dict[str, Any]:
        return {
            "p_x": self.p_x,
            "ate": self.ate,
            "n_per_arm": self.n_per_arm,
            "reps": len(self.observed_lifts),
            "power": self.power,
            "predicted_mod": self.predicted_mod,
            "min_significant_lift": self.min_significant_lift,
            "min_significant_over_ate": (None if self.min_significant_lift is None
                                         else self.min_significant_lift / self.ate),
            "master_seed": self.master_seed,
            "config": self.config,
        }


MOD_GRID_P = (0.1, 0.3, 0.6)
MOD_GRID_ATE = (0.02, 0.05, 0.1)


def run_mod_experiment(p_x: float, ate: float, reps: int = DEFAULT_REPS, *, master_seed: int,
                       threads: int = 1, design: DesignParams = DEFAULT_DESIGN) -> ModHistogram:
    """Observed lifts and their significance for binary arms sized to detect ``ate``."""
    if ate == 0:
        raise DomainError("a null effect has no MOD to verify")
    _check_reps(reps)
    sizing = size_iid_binary(p_x, ate, design)
    n = sizing.n_per_arm
    p_y = p_x + ate
    z = design.z_alpha

    def replicate(r: int) -> tuple[float, bool]:
        x = _stream(master_seed, r, CONTROL, ALT).gen.binomial(n, p_x) / n
        y = _stream(master_seed, r, TREATMENT, ALT).gen.binomial(n, p_y) / n
        lift = float(y - x)
        se = math.sqrt((x * (1 - x) + y * (1 - y)) / n)
        return lift, (abs(lift / se) > z) if se > 0 else False

    lifts = _map_replicates(replicate, reps, threads)
    positive = [lift for lift, sig in lifts if sig and lift > 0]
    return ModHistogram(
        observed_lifts=lifts,
        ate=ate,
        min_significant_lift=min(positive) if positive else None,
        p_x=p_x,
        n_per_arm=n,
        predicted_mod=sizing.implied_mod,
        master_seed=master_seed,
        config={"suite": "mod", "p_x": p_x, "ate": ate, "reps": reps, "design": asdict(design)},
    )


def run_mod_grid(reps: int = DEFAULT_REPS, *, master_seed: int, threads: int = 1,
                 p_values: Sequence[float] = MOD_GRID_P, ates: Sequence[float] = MOD_GRID_ATE,
                 design: DesignParams = DEFAULT_DESIGN) -> list[ModHistogram]:
    return [run_mod_experiment(p, a, reps, master_seed=master_seed, threads=threads, design=design)
            for p in p_values for a in ates]
