"""Closed-form sample size, MOD and allocation for independent observations.

All sizes are per arm unless stated otherwise and are rounded up once, at
the very end, from the real-valued solution.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Literal

from .errors import DomainError, InfeasibleDesignError
from .stats_core import check_probability, normal_cdf, normal_quantile

__all__ = [
    "AllocationResult",
    "DesignParams",
    "SizingResult",
    "allocate_unbalanced",
    "ate_from_mod",
    "mod_from_ate",
    "mod_ratio",
    "power_unbalanced",
    "rel_abs_ratio",
    "size_iid_binary",
    "size_iid_continuous",
    "size_relative_iid",
]

Sides = Literal["one", "two"]

# Below this treatment share the point estimate in treatment becomes unreliable.
MIN_RECOMMENDED_F = 0.2


@dataclass(frozen=True)
class DesignParams:
    alpha: float = 0.05
    power: float = 0.8
    sides: Sides = "two"

    def __post_init__(self):
        check_probability(self.alpha, "alpha")
        check_probability(self.power, "power")
        if self.sides not in ("one", "two"):
            raise DomainError(f"sides must be 'one' or 'two', got {self.sides!r}")

    @property
    def z_alpha(self) -> float:
        """Critical value: z_{1-alpha/2} for two-sided tests, z_{1-alpha} for one-sided."""
        tail = self.alpha / 2 if self.sides == "two" else self.alpha
        return normal_quantile(1.0 - tail)

    @property
    def z_beta(self) -> float:
        return normal_quantile(self.power)

    @property
    def z_sum_sq(self) -> float:
        return (self.z_alpha + self.z_beta) ** 2


DEFAULT_DESIGN = DesignParams()


@dataclass(frozen=True)
class SizingResult:
    n_per_arm: int
    unit_kind: Literal["analysis_unit", "randomization_unit"]
    implied_mod: float
    z_alpha: float
    z_beta: float
    design: DesignParams
    raw_n: float
    lift_kind: Literal["absolute", "relative"] = "absolute"
    inputs: dict[str, Any] = field(default_factory=dict)
    window_days: int | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["design"] = asdict(self.design)
        return d


def _check_lift(delta: float, name: str = "delta") -> float:
    delta = float(delta)
    if delta == 0 or not math.isfinite(delta):
        raise DomainError(f"{name} must be finite and nonzero; a zero effect cannot be detected")
    return delta


def _result(raw: float, lift: float, design: DesignParams, /, *, unit_kind="analysis_unit",
            lift_kind="absolute", window_days=None, **inputs) -> SizingResult:
    return SizingResult(
        n_per_arm=math.ceil(raw),
        unit_kind=unit_kind,
        implied_mod=mod_from_ate(lift, design),
        z_alpha=design.z_alpha,
        z_beta=design.z_beta,
        design=design,
        raw_n=raw,
        lift_kind=lift_kind,
        inputs=inputs,
        window_days=window_days,
    )


def size_iid_continuous(sigma2: float, delta: float,
                        design: DesignParams = DEFAULT_DESIGN) -> SizingResult:
    """Per-arm n = 2 sigma^2 (z_a + z_b)^2 / delta^2 for a two-sample mean comparison."""
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2!r}")
    delta = _check_lift(delta)
    raw = 2.0 * sigma2 * design.z_sum_sq / delta**2
    return _result(raw, delta, design, sigma2=sigma2, delta=delta)


def _binary_pair(p_x: float, p_y: float) -> float:
    check_probability(p_x, "p_x")
    if not 0.0 < p_y < 1.0:
        raise InfeasibleDesignError(f"implied treatment rate {p_y!r} lies outside (0, 1)")
    p_pool = (p_x + p_y) / 2
    return p_pool * (1.0 - p_pool)


def size_iid_binary(p_x: float, delta: float,
                    design: DesignParams = DEFAULT_DESIGN) -> SizingResult:
    """Two-proportion sizing with pooled variance p_pool (1 - p_pool)."""
    delta = _check_lift(delta)
    var_pool = _binary_pair(p_x, p_x + delta)
    raw = 2.0 * var_pool * design.z_sum_sq / delta**2
    return _result(raw, delta, design, p_x=p_x, delta=delta)


def relative_lift_factor(mu_x: float, delta_rel: float) -> float:
    """1/mu_x^2 + mu_y^2/mu_x^4 with mu_y = (1 + delta_rel) mu_x."""
    mu_y = (1.0 + delta_rel) * mu_x
    return 1.0 / mu_x**2 + mu_y**2 / mu_x**4


def size_relative_iid(baseline: float, delta_rel: float, *, sigma2: float | None = None,
                      binary: bool = False,
                      design: DesignParams = DEFAULT_DESIGN) -> SizingResult:
    """Per-arm n to detect a relative lift ``delta_rel`` over ``baseline``.

    Continuous outcomes need ``sigma2`` (assumed common to both arms). With
    ``binary=True`` the baseline is a rate p_x and the variance is the pooled
    p_pool (1 - p_pool) with p_y = (1 + delta_rel) p_x.
    """
    baseline = float(baseline)
    if baseline == 0 or not math.isfinite(baseline):
        raise DomainError("relative lift is undefined for a zero baseline")
    delta_rel = _check_lift(delta_rel, "delta_rel")
    if binary:
        if sigma2 is not None:
            raise DomainError("sigma2 is implied by the rates for binary outcomes")
        variance = _binary_pair(baseline, (1.0 + delta_rel) * baseline)
    else:
        if sigma2 is None or not sigma2 > 0:
            raise DomainError("continuous relative sizing needs a positive sigma2")
        variance = sigma2
    raw = relative_lift_factor(baseline, delta_rel) * variance * design.z_sum_sq / delta_rel**2
    return _result(raw, delta_rel, design, lift_kind="relative", baseline=baseline,
                   delta_rel=delta_rel, sigma2=sigma2, binary=binary)


def rel_abs_ratio(delta_rel: float) -> float:
    """n_rel / n_abs at matched effect: (1 + (1 + delta_rel)^2) / 2, free of the baseline."""
    if not delta_rel > -1:
        raise DomainError(f"delta_rel must exceed -1, got {delta_rel!r}")
    return (1.0 + (1.0 + delta_rel) ** 2) / 2.0


def mod_ratio(design: DesignParams = DEFAULT_DESIGN) -> float:
    """|MOD| / |ATE| = z_a / (z_a + z_b); depends only on alpha, power and sides."""
    za = design.z_alpha
    return za / (za + design.z_beta)


def mod_from_ate(ate: float, design: DesignParams = DEFAULT_DESIGN) -> float:
    """Smallest observed difference that will be significant when sized for ``ate``."""
    ate = _check_lift(ate, "ate")
    return ate * mod_ratio(design)


def ate_from_mod(mod: float, design: DesignParams = DEFAULT_DESIGN) -> float:
    """Back out the effect to size for, given a business-meaningful MOD."""
    mod = _check_lift(mod, "mod")
    return mod / mod_ratio(design)


def power_unbalanced(n_all: float, f: float, delta: float, sigma2: float,
                     design: DesignParams = DEFAULT_DESIGN) -> float:
    """Power of the z-test with n_all total units, a fraction f of them in treatment.

    Evaluates 1 - Phi(z_a - |delta| sqrt(n_all f (1 - f)) / sigma). The
    opposite tail is ignored, as in the usual sizing approximation.
    """
    if not n_all >= 2:
        raise DomainError(f"n_all must be at least 2, got {n_all!r}")
    if not 0.0 < f < 1.0:
        raise DomainError(f"f must lie in (0, 1), got {f!r}")
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2!r}")
    delta = _check_lift(delta)
    shift = abs(delta) * math.sqrt(n_all * f * (1.0 - f) / sigma2)
    return 1.0 - normal_cdf(design.z_alpha - shift)


@dataclass(frozen=True)
class AllocationResult:
    f: float
    n_treat: int
    n_control: int
    n_all: int
    duration_ratio_vs_balanced: float
    total_ratio_vs_balanced: float
    achieved_power: float
    warning: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def allocate_unbalanced(f: float, delta: float, sigma2: float,
                        design: DesignParams = DEFAULT_DESIGN) -> AllocationResult:
    """Arm sizes when only a share ``f`` <= 0.5 of traffic goes to treatment.

    Holds power fixed by keeping n_all f (1 - f) equal to its balanced value,
    so the treatment arm (which sets the duration) shrinks by 0.5 / (1 - f)
    while total traffic grows by 0.25 / (f (1 - f)).
    """
    f = float(f)
    if not 0.0 < f <= 0.5:
        raise DomainError(f"f must lie in (0, 0.5], got {f!r}")
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2!r}")
    delta = _check_lift(delta)
    # n_all f (1 - f) must equal sigma^2 (z_a + z_b)^2 / delta^2
    effective = sigma2 * design.z_sum_sq / delta**2
    raw_all = effective / (f * (1.0 - f))
    n_treat = math.ceil(raw_all * f)
    n_control = math.ceil(raw_all * (1.0 - f))
    n_all = n_treat + n_control
    warning = None
    if f < MIN_RECOMMENDED_F:
        warning = (f"treatment share f={f:g} is below {MIN_RECOMMENDED_F}: "
                   "treatment estimates become unreliable and duration gains diminish")
    return AllocationResult(
        f=f,
        n_treat=n_treat,
        n_control=n_control,
        n_all=n_all,
        duration_ratio_vs_balanced=0.5 / (1.0 - f),
        total_ratio_vs_balanced=0.25 / (f * (1.0 - f)),
        achieved_power=power_unbalanced(n_all, n_treat / n_all, delta, sigma2, design),
        warning=warning,
    )
