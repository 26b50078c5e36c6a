"""Post-fit quantities: deviance tests, ICC, odds ratios, Wald tests, predicted probabilities."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit
from scipy.stats import norm
from scipy.stats import t as t_dist

from .crosstab import chi_square_sf
from .engine import FitResult, ParamVector, category_probs

# share of latent-logistic variance, pi^2/3
LOGISTIC_VARIANCE = math.pi**2 / 3.0


@dataclass(frozen=True)
class LrtResult:
    chi2: float
    df: int
    p_value: float


@dataclass(frozen=True)
class OddsRatioResult:
    or_hat: float
    ci_low: float
    ci_high: float
    level: float = 0.95


@dataclass(frozen=True)
class ProbabilityProfile:
    scores: tuple[float, ...]
    cumulative: tuple[float, ...]   # P(R <= k), k = 1..K-1
    categories: tuple[float, ...]   # P(R = k), k = 1..K


@dataclass(frozen=True)
class WaldTest:
    name: str
    estimate: float
    se: float
    t: float
    p_value: float
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class VarianceZTest:
    z: float
    p_one_sided: float


def lrt(dev_reduced: float, dev_full: float, df: int) -> LrtResult:
    """Deviance (likelihood-ratio) test between nested fits on the same data."""
    if df < 1 or int(df) != df:
        raise ValueError(f"df must be a positive integer, got {df!r}")
    chi2 = dev_reduced - dev_full
    if chi2 < 0:
        raise ValueError(
            f"reduced-model deviance {dev_reduced} is below the full model's "
            f"{dev_full}; fits are not nested or did not converge"
        )
    return LrtResult(chi2=float(chi2), df=int(df), p_value=chi_square_sf(chi2, df))


def icc(tau00: float) -> float:
    """Intra-class correlation tau00 / (tau00 + pi^2/3) on the latent logit scale.

    pi^2/3 = 3.28987... is used at full precision (reports often round it
    to 3.29; the quotient agrees to four decimals either way).
    """
    if tau00 < 0 or not math.isfinite(tau00):
        raise ValueError(f"tau00 must be finite and >= 0, got {tau00!r}")
    return tau00 / (tau00 + LOGISTIC_VARIANCE)


def odds_ratio(beta: float, se: float, level: float = 0.95) -> OddsRatioResult:
    """exp(beta) with a log-scale Wald confidence interval."""
    if se <= 0:
        raise ValueError(f"se must be positive, got {se!r}")
    if not 0 < level < 1:
        raise ValueError(f"confidence level must be in (0,1), got {level!r}")
    z = norm.ppf(0.5 + level / 2.0)
    return OddsRatioResult(
        or_hat=math.exp(beta),
        ci_low=math.exp(beta - z * se),
        ci_high=math.exp(beta + z * se),
        level=level,
    )


def cumulative_pp(eta: float) -> float:
    """Predicted cumulative probability exp(eta)/(1+exp(eta)), overflow-safe."""
    if not math.isfinite(eta):
        raise ValueError(f"eta must be finite, got {eta!r}")
    return float(expit(eta))


def profile_probabilities(fit, x, u: float = 0.0) -> ProbabilityProfile:
    """Cumulative and per-category probabilities at covariate scores x.

    Accepts a FitResult or a ParamVector.  Category probabilities come from
    differencing adjacent cumulative probabilities; the last category is
    1 - P(R <= K-1).
    """
    params = fit.estimates if isinstance(fit, FitResult) else fit
    if not isinstance(params, ParamVector):
        raise TypeError("fit must be a FitResult or ParamVector")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size != params.beta.size:
        raise ValueError(f"expected {params.beta.size} covariate scores, got {x.size}")
    shift = float(x @ params.beta) if x.size else 0.0
    cumulative = tuple(cumulative_pp(t + shift + u) for t in params.thresholds)
    categories = category_probs(params, x, u)
    return ProbabilityProfile(
        scores=tuple(float(v) for v in x),
        cumulative=cumulative,
        categories=tuple(float(p) for p in categories),
    )


def wald_t_tests(fit: FitResult, df: int | None = None, names=None) -> list[WaldTest]:
    """Two-sided t tests and CIs for the fitted thresholds.

    The default denominator df is the cluster count minus one.
    """
    if df is None:
        df = fit.spec.n_clusters - 1
    if df < 1:
        raise ValueError(f"df must be >= 1, got {df!r}")
    if names is None:
        names = [f"threshold_{k}" for k in range(1, fit.estimates.thresholds.size + 1)]
    crit = t_dist.ppf(0.975, df)
    out = []
    for name, est, se in zip(names, fit.estimates.thresholds, fit.se_thresholds):
        t_val = est / se
        out.append(
            WaldTest(
                name=name,
                estimate=float(est),
                se=float(se),
                t=float(t_val),
                p_value=float(2.0 * t_dist.sf(abs(t_val), df)),
                ci_low=float(est - crit * se),
                ci_high=float(est + crit * se),
            )
        )
    return out


def variance_z_test(tau_hat: float, se_tau: float) -> VarianceZTest:
    """One-sided Wald z test of the random-intercept variance."""
    if tau_hat <= 0 or se_tau <= 0:
        raise ValueError("tau_hat and se_tau must be positive")
    z = tau_hat / se_tau
    return VarianceZTest(z=float(z), p_one_sided=float(norm.sf(z)))
