"""Synthetic clustered ordinal data from the random-intercept cumulative-logit model.

Randomness comes from numpy's PCG64 generator, so datasets are portable and
byte-reproducible from a 64-bit seed.  Replicate r of a study draws from
``SeedSequence(seed, spawn_key=(r,))``; replicate streams are independent and
can be regenerated without touching any other replicate.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit
from scipy.stats import norm

from . import engine
from .data import DEFAULT_COVARIATES, EncodedDataset
from .engine import FitError, ModelSpec, ParamVector
from .inference import icc


class StudyError(RuntimeError):
    """Too many replicate fits failed for the study summary to be trusted."""


@dataclass(frozen=True)
class CovariateModel:
    """Categorical covariate generator: category probabilities in score order."""

    name: str
    probabilities: tuple[float, ...]
    categories: tuple[str, ...] | None = None

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probabilities)
        if len(probs) < 2 or any(p < 0 for p in probs):
            raise ValueError(f"{self.name}: need >= 2 nonnegative probabilities")
        if abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"{self.name}: probabilities sum to {sum(probs)}, not 1")
        labels = self.categories or tuple(str(k) for k in range(len(probs)))
        if len(labels) != len(probs):
            raise ValueError(f"{self.name}: labels must match probabilities")
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "categories", tuple(labels))


# Category shares close to the survey margins the default codebook mirrors.
DEFAULT_COVARIATE_MODELS = {
    "residence": (0.7966, 0.2034),
    "religion": (0.3721, 0.0911, 0.3424, 0.1944),
    "living_standard": (0.6068, 0.2808, 0.1124),
    "sex": (0.5159, 0.4841),
    "literacy": (0.6011, 0.3989),
    "children_ever_born": (0.4383, 0.3801, 0.1816),
    "age_at_marriage": (0.3213, 0.6274, 0.0513),
    "child_age": (0.5735, 0.4265),
}


def default_covariate_model(name: str) -> CovariateModel:
    try:
        probabilities = DEFAULT_COVARIATE_MODELS[name]
    except KeyError:
        raise ValueError(
            f"no default generator for covariate {name!r}; "
            f"known: {sorted(DEFAULT_COVARIATE_MODELS)}"
        ) from None
    labels = {c.name: c.categories for c in DEFAULT_COVARIATES}[name]
    return CovariateModel(name, probabilities, labels)


@dataclass(frozen=True)
class SimConfig:
    """Generative truth for one dataset: parameters, sizes, covariate mixes."""

    true_params: ParamVector
    n_clusters: int
    n_per_cluster: int | tuple[int, ...]
    covariates: tuple[CovariateModel, ...] = ()
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        sizes = self.cluster_sizes()
        if len(sizes) != self.n_clusters or any(s < 1 for s in sizes):
            raise ValueError("every cluster size must be >= 1")
        if len(self.covariates) != self.true_params.beta.size:
            raise ValueError(
                f"{len(self.covariates)} covariate generators for "
                f"{self.true_params.beta.size} slopes"
            )
        object.__setattr__(self, "covariates", tuple(self.covariates))

    def cluster_sizes(self) -> tuple[int, ...]:
        if isinstance(self.n_per_cluster, int):
            return (self.n_per_cluster,) * self.n_clusters
        return tuple(int(s) for s in self.n_per_cluster)

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            n_levels=self.true_params.n_levels,
            covariates=tuple(c.name for c in self.covariates),
            n_clusters=self.n_clusters,
        )


def _sample_categorical(rng, probabilities, size) -> np.ndarray:
    cum = np.cumsum(probabilities)
    cum[-1] = 1.0
    return np.searchsorted(cum, rng.random(size), side="left").astype(np.float64)


def _generate(cfg: SimConfig, seed_seq: np.random.SeedSequence):
    rng = np.random.default_rng(seed_seq)
    params = cfg.true_params
    sizes = np.asarray(cfg.cluster_sizes())
    n = int(sizes.sum())
    cluster_index = np.repeat(np.arange(cfg.n_clusters), sizes)

    sd = math.sqrt(params.tau00)
    u = rng.normal(0.0, sd, size=cfg.n_clusters) if sd > 0 else np.zeros(cfg.n_clusters)

    design = np.empty((n, len(cfg.covariates)))
    for col, cov in enumerate(cfg.covariates):
        design[:, col] = _sample_categorical(rng, cov.probabilities, n)

    eta = params.thresholds[None, :] + (design @ params.beta + u[cluster_index])[:, None]
    cum_probs = expit(eta)  # (n, K-1), nondecreasing per row
    draws = rng.random(n)
    responses = 1 + (draws[:, None] > cum_probs).sum(axis=1)

    dataset = EncodedDataset(
        responses=responses,
        design=design,
        cluster_index=cluster_index,
        n_clusters=cfg.n_clusters,
        n_levels=params.n_levels,
        covariate_names=tuple(c.name for c in cfg.covariates),
        covariate_categories=tuple(c.categories for c in cfg.covariates),
        cluster_labels=tuple(f"cluster{j:03d}" for j in range(cfg.n_clusters)),
    )
    return dataset, u


def generate(cfg: SimConfig) -> tuple[EncodedDataset, np.ndarray]:
    """Draw one dataset (and the underlying cluster intercepts) from the truth.

    Draw order is fixed: cluster intercepts, then covariate columns in order,
    then one uniform per observation, inverted through the cumulative
    response probabilities.
    """
    return _generate(cfg, np.random.SeedSequence(cfg.seed))


def replicate_dataset(cfg: SimConfig, replicate: int) -> tuple[EncodedDataset, np.ndarray]:
    """Dataset for study replicate r, regenerable independently of the others."""
    return _generate(cfg, np.random.SeedSequence(cfg.seed, spawn_key=(replicate,)))


@dataclass
class RecoveryStudy:
    """Per-parameter summary of a generate-then-fit study."""

    parameter_names: tuple[str, ...]
    truth: np.ndarray
    bias: np.ndarray
    empirical_se: np.ndarray
    mean_reported_se: np.ndarray
    coverage: np.ndarray
    mean_icc: float
    replicates_used: int
    n_failed: int
    estimates: np.ndarray = field(repr=False, default=None)  # (used, n_params)


def _fit_replicate(cfg: SimConfig, replicate: int, tol: float, max_iter: int):
    data, _ = replicate_dataset(cfg, replicate)
    try:
        result = engine.fit(cfg.model_spec(), data, tol=tol, max_iter=max_iter)
    except FitError as exc:
        return None, str(exc)
    if not result.converged:
        return None, "did not converge"
    est = np.concatenate(
        [result.estimates.thresholds, result.estimates.beta, [result.estimates.tau00]]
    )
    se = np.concatenate([result.se_thresholds, result.se_beta, [result.se_tau00]])
    return (est, se), None


def recovery_study(
    cfg: SimConfig,
    replicates: int,
    level: float = 0.95,
    tol: float = 1e-8,
    max_iter: int = 200,
    n_jobs: int = 1,
) -> RecoveryStudy:
    """Run generate-and-fit replicates; summarize bias, SEs, and CI coverage.

    Replicate r draws from SeedSequence(cfg.seed, spawn_key=(r,)), so the
    summary does not depend on n_jobs.  Failed fits are dropped; more than 5%
    failures aborts the study.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    truth = np.concatenate(
        [cfg.true_params.thresholds, cfg.true_params.beta, [cfg.true_params.tau00]]
    )
    if n_jobs != 1:
        outcomes = Parallel(n_jobs=n_jobs)(
            delayed(_fit_replicate)(cfg, r, tol, max_iter) for r in range(replicates)
        )
    else:
        outcomes = [_fit_replicate(cfg, r, tol, max_iter) for r in range(replicates)]

    estimates, ses = [], []
    n_failed = 0
    for payload, _err in outcomes:
        if payload is None:
            n_failed += 1
        else:
            estimates.append(payload[0])
            ses.append(payload[1])
    if n_failed > 0.05 * replicates:
        raise StudyError(f"{n_failed}/{replicates} replicate fits failed")

    est = np.asarray(estimates)
    se = np.asarray(ses)
    z = float(norm.ppf(0.5 + level / 2.0))
    covered = np.abs(est - truth[None, :]) <= z * se
    spec = cfg.model_spec()
    names = tuple(
        [f"threshold_{k}" for k in range(1, spec.n_thresholds + 1)]
        + list(spec.covariates)
        + ["tau00"]
    )
    return RecoveryStudy(
        parameter_names=names,
        truth=truth,
        bias=est.mean(axis=0) - truth,
        empirical_se=est.std(axis=0, ddof=1) if est.shape[0] > 1 else np.zeros(truth.size),
        mean_reported_se=se.mean(axis=0),
        coverage=covered.mean(axis=0),
        mean_icc=float(np.mean([icc(t) for t in est[:, -1]])),
        replicates_used=int(est.shape[0]),
        n_failed=n_failed,
        estimates=est,
    )
