"""Random-intercept cumulative-logit likelihood, Laplace approximation, and ML fitting.

Model
-----
For observation i in cluster j with ordinal response R in 1..K and covariate
scores x::

    logit P(R <= k) = theta_k + beta' x + u_j,   u_j ~ N(0, tau00),

with strictly increasing thresholds theta_1 < ... < theta_{K-1}.  A larger
linear predictor pushes mass toward low categories.  The marginal likelihood
integrates each cluster's random intercept out; the Laplace approximation
expands the cluster log integrand at its mode, and adaptive Gauss-Hermite
quadrature (exact Laplace at one node) serves as the validation oracle.

Internally the fitter works on an unconstrained vector
``(theta_1, log(theta_2-theta_1), ..., beta, log tau00)`` so threshold
ordering and variance positivity hold at every iterate.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit, logsumexp, roots_hermite

from .data import EncodedDataset

LOG_2PI = math.log(2.0 * math.pi)
TAU_FLOOR = 1e-10
MODE_TOL = 1e-8
MODE_MAX_ITER = 50
GRAD_NORM_TOL = 1e-5


class FitError(RuntimeError):
    """Model fitting failed outright (bad inputs or non-finite likelihood)."""


class ClusterConvergenceError(FitError):
    """A cluster's random-intercept mode could not be located."""


@dataclass(frozen=True)
class ModelSpec:
    """Which covariates enter the model, for a K-level response over J clusters."""

    n_levels: int
    covariates: tuple[str, ...] = ()
    n_clusters: int = 1

    def __post_init__(self):
        if self.n_levels < 2:
            raise ValueError("n_levels must be >= 2")
        if len(set(self.covariates)) != len(self.covariates):
            raise ValueError("covariates must be duplicate-free")
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        object.__setattr__(self, "covariates", tuple(self.covariates))

    @property
    def n_thresholds(self) -> int:
        return self.n_levels - 1


@dataclass(frozen=True)
class ParamVector:
    """Thresholds, covariate slopes, and the random-intercept variance."""

    thresholds: np.ndarray
    beta: np.ndarray
    tau00: float

    def __post_init__(self):
        thresholds = np.atleast_1d(np.asarray(self.thresholds, dtype=np.float64)).copy()
        beta = np.atleast_1d(np.asarray(self.beta, dtype=np.float64)).copy()
        if beta.size == 0:
            beta = beta.reshape(0)
        if not np.all(np.isfinite(thresholds)) or not np.all(np.isfinite(beta)):
            raise ValueError("parameters must be finite")
        if thresholds.size >= 2 and not np.all(np.diff(thresholds) > 0):
            raise ValueError(f"thresholds must be strictly increasing, got {thresholds}")
        if not math.isfinite(self.tau00) or self.tau00 < 0:
            raise ValueError(f"tau00 must be finite and >= 0, got {self.tau00}")
        thresholds.setflags(write=False)
        beta.setflags(write=False)
        object.__setattr__(self, "thresholds", thresholds)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "tau00", float(self.tau00))

    @property
    def n_levels(self) -> int:
        return self.thresholds.size + 1


@dataclass(frozen=True)
class ClusterData:
    """One cluster's responses and covariate scores."""

    responses: np.ndarray  # (m,) ints in 1..K; may be empty
    design: np.ndarray     # (m, p)

    def __post_init__(self):
        responses = np.atleast_1d(np.asarray(self.responses, dtype=np.int64))
        design = np.asarray(self.design, dtype=np.float64)
        if design.ndim == 1:
            design = design.reshape(responses.size, -1) if responses.size else design.reshape(0, 0)
        if design.shape[0] != responses.size:
            raise ValueError("design rows must match responses")
        responses.setflags(write=False)
        design.setflags(write=False)
        object.__setattr__(self, "responses", responses)
        object.__setattr__(self, "design", design)


@dataclass(frozen=True)
class ClusterState:
    """Located mode of a cluster's log integrand, its curvature, and the
    cluster's Laplace log-likelihood contribution."""

    mode: float
    curvature: float
    loglik: float


@dataclass
class FitResult:
    """Maximum-likelihood estimates with standard errors and diagnostics."""

    spec: ModelSpec
    estimates: ParamVector
    se_thresholds: np.ndarray
    se_beta: np.ndarray
    se_tau00: float
    minus2ll: float
    converged: bool
    iterations: int
    gradient_norm: float
    n_obs: int = 0

    def parameter_rows(self) -> list[tuple[str, float, float]]:
        """(name, estimate, SE) per reported parameter, thresholds first."""
        rows = []
        for k, (est, se) in enumerate(
            zip(self.estimates.thresholds, self.se_thresholds), start=1
        ):
            rows.append((f"threshold_{k}", float(est), float(se)))
        for name, est, se in zip(self.spec.covariates, self.estimates.beta, self.se_beta):
            rows.append((name, float(est), float(se)))
        rows.append(("tau00", float(self.estimates.tau00), float(self.se_tau00)))
        return rows

    @property
    def n_parameters(self) -> int:
        return self.estimates.thresholds.size + self.estimates.beta.size + 1


# ---------------------------------------------------------------------------
# observation-level kernels
# ---------------------------------------------------------------------------

def _log_expm1(d):
    """log(exp(d) - 1) for d > 0, overflow-safe."""
    d = np.asarray(d, dtype=np.float64)
    small = d < 30.0
    out = np.where(small, np.expm1(np.where(small, d, 1.0)), 1.0)
    # for large d: log(e^d - 1) = d + log1p(-e^-d)
    return np.where(small, np.log(out), d + np.log1p(-np.exp(-np.where(small, 30.0, d))))


def _padded_thresholds(thresholds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = np.concatenate(([-np.inf], thresholds))
    hi = np.concatenate((thresholds, [np.inf]))
    return lo, hi


def _obs_bounds(thresholds, responses, shift):
    """Lower/upper cumulative-logit arguments per observation.

    shift is beta'x + u per observation; responses are 1..K.  Level 1 has
    lower bound -inf, level K upper bound +inf.
    """
    lo_pad, hi_pad = _padded_thresholds(thresholds)
    idx = responses - 1
    return lo_pad[idx] + shift, hi_pad[idx] + shift


def _log_prob(lo, hi):
    """log(F(hi) - F(lo)) for the standard logistic F, stable at the tails."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    first = np.isneginf(lo)
    last = np.isposinf(hi)
    mid = ~(first | last)
    out = np.empty(lo.shape, dtype=np.float64)
    out[first] = log_expit(hi[first])
    out[last] = log_expit(-lo[last])
    if mid.any():
        a, b = lo[mid], hi[mid]
        out[mid] = log_expit(a) + log_expit(-b) + _log_expm1(b - a)
    return out


def _logistic_parts(lo, hi):
    """(Fa, Fb, fa, fb) with the conventions F(-inf)=0, F(inf)=1, f(+-inf)=0."""
    Fa = expit(lo)
    Fb = expit(hi)
    fa = Fa * (1.0 - Fa)
    fb = Fb * (1.0 - Fb)
    return Fa, Fb, fa, fb


def _threshold_ratios(lo, hi):
    """(Ra, Rb) = (f(lo), f(hi)) / (F(hi) - F(lo)), stable at the tails.

    These are the per-threshold score contributions: d log p / d theta at the
    response's lower/upper threshold is -Ra and +Rb.  Boundary categories get
    a zero ratio on their open side.
    """
    first = np.isneginf(lo)
    last = np.isposinf(hi)
    mid = ~(first | last)
    Ra = np.zeros(lo.shape, dtype=np.float64)
    Rb = np.zeros(lo.shape, dtype=np.float64)
    # p = F(b) for level 1: f(b)/p = 1 - F(b); p = 1 - F(a) for level K: f(a)/p = F(a)
    Rb[first] = expit(-hi[first])
    Ra[last] = expit(lo[last])
    if mid.any():
        a, b = lo[mid], hi[mid]
        log_em1 = _log_expm1(b - a)
        Rb[mid] = np.exp(log_expit(b) - log_expit(a) - log_em1)
        Ra[mid] = np.exp(log_expit(-a) - log_expit(-b) - log_em1)
    return Ra, Rb


def category_probs(params: ParamVector, x=None, u: float = 0.0) -> np.ndarray:
    """Probabilities of each response level at covariate scores x and intercept u.

    p_k = F(eta_k) - F(eta_{k-1}) with eta_0 = -inf and eta_K = +inf; the
    entries are positive and sum to one.
    """
    shift = _shift_of(params, x) + u
    K = params.n_levels
    lo, hi = _obs_bounds(params.thresholds, np.arange(1, K + 1), shift)
    return np.exp(_log_prob(lo, hi))


def cumulative_eta(params: ParamVector, x, u: float, k: int) -> float:
    """Linear predictor of logit P(R <= k): theta_k + beta'x + u."""
    if not 1 <= k <= params.thresholds.size:
        raise ValueError(f"k must be in 1..{params.thresholds.size}, got {k}")
    return float(params.thresholds[k - 1] + _shift_of(params, x) + u)


def _shift_of(params: ParamVector, x) -> float:
    if x is None:
        x = np.zeros(0)
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.size != params.beta.size:
        raise ValueError(f"expected {params.beta.size} covariate scores, got {x.size}")
    return float(x @ params.beta) if x.size else 0.0


# ---------------------------------------------------------------------------
# cluster log integrand and its mode
# ---------------------------------------------------------------------------

def cluster_log_integrand(
    params: ParamVector, cluster: ClusterData, u: float
) -> tuple[float, float, float]:
    """Value, first, and second derivative in u of the cluster log integrand.

    g(u) = sum_i log p_{r_i}(u) - u^2/(2 tau00) - log(2 pi tau00)/2.
    Derivatives are analytic: d log p/du = 1 - F(lo) - F(hi) and
    d2 log p/du2 = -(f(lo) + f(hi)).
    """
    tau = params.tau00
    if tau <= 0:
        raise ValueError("cluster_log_integrand requires tau00 > 0")
    shift = cluster.design @ params.beta + u if cluster.responses.size else np.zeros(0)
    lo, hi = _obs_bounds(params.thresholds, cluster.responses, shift)
    Fa, Fb, fa, fb = _logistic_parts(lo, hi)
    value = float(_log_prob(lo, hi).sum()) - u * u / (2.0 * tau) - 0.5 * math.log(
        2.0 * math.pi * tau
    )
    d1 = float((1.0 - Fa - Fb).sum()) - u / tau
    d2 = -float((fa + fb).sum()) - 1.0 / tau
    return value, d1, d2


def find_cluster_mode(params: ParamVector, cluster: ClusterData) -> ClusterState:
    """Locate the maximizer of the cluster log integrand by damped Newton.

    Falls back to bisection on the first derivative over
    [-10 sqrt(tau00), 10 sqrt(tau00)] if an iterate is non-concave; a bracket
    failure raises ClusterConvergenceError.  Returns the mode, the curvature
    there, and the Laplace contribution
    g(u_hat) + log(2 pi)/2 - log(-g''(u_hat))/2.
    """
    u = 0.0
    g, d1, d2 = cluster_log_integrand(params, cluster, u)
    for _ in range(MODE_MAX_ITER):
        if abs(d1) <= MODE_TOL:
            break
        if not d2 < 0:
            u = _bisect_mode(params, cluster)
            g, d1, d2 = cluster_log_integrand(params, cluster, u)
            break
        step = -d1 / d2
        for _ in range(60):
            g_new, d1_new, d2_new = cluster_log_integrand(params, cluster, u + step)
            if g_new >= g - 1e-9 * (1.0 + abs(g)):
                break
            step *= 0.5
        u += step
        g, d1, d2 = g_new, d1_new, d2_new
    if abs(d1) > MODE_TOL * 10:
        u = _bisect_mode(params, cluster)
        g, d1, d2 = cluster_log_integrand(params, cluster, u)
    loglik = g + 0.5 * LOG_2PI - 0.5 * math.log(-d2)
    return ClusterState(mode=float(u), curvature=float(d2), loglik=float(loglik))


def _bisect_mode(params: ParamVector, cluster: ClusterData) -> float:
    half_width = 10.0 * math.sqrt(params.tau00)
    lo, hi = -half_width, half_width
    d1_lo = cluster_log_integrand(params, cluster, lo)[1]
    d1_hi = cluster_log_integrand(params, cluster, hi)[1]
    if not (d1_lo > 0 > d1_hi):
        raise ClusterConvergenceError(
            f"cannot bracket the integrand mode in [{lo:.3g}, {hi:.3g}] "
            f"(g' = {d1_lo:.3g}, {d1_hi:.3g})"
        )
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        d1 = cluster_log_integrand(params, cluster, mid)[1]
        if abs(d1) <= MODE_TOL or hi - lo < 1e-14:
            return mid
        if d1 > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def ghq_cluster_loglik(params: ParamVector, cluster: ClusterData, nodes: int) -> float:
    """Cluster marginal log-likelihood by adaptive Gauss-Hermite quadrature.

    Nodes are centered at the cluster mode and scaled by
    (-g''(u_hat))^(-1/2); one node reproduces the Laplace value.
    """
    if nodes % 2 == 0 or not 1 <= nodes <= 199:
        raise ValueError(f"nodes must be odd and in 1..199, got {nodes}")
    state = find_cluster_mode(params, cluster)
    sigma = (-state.curvature) ** -0.5
    points, weights = roots_hermite(nodes)
    values = np.array(
        [
            cluster_log_integrand(params, cluster, state.mode + math.sqrt(2.0) * sigma * t)[0]
            for t in points
        ]
    )
    return float(logsumexp(values + points**2 + np.log(weights)) + math.log(math.sqrt(2.0) * sigma))


# ---------------------------------------------------------------------------
# vectorized whole-dataset engine
# ---------------------------------------------------------------------------

class _LaplaceCore:
    """Vectorized Laplace log-likelihood and analytic gradient for one dataset.

    All per-observation work is flat numpy; per-cluster reductions use
    bincount (sequential, order-fixed), so totals are reproducible.
    Cluster modes are warm-started between calls.
    """

    def __init__(self, data: EncodedDataset, covariates: tuple[str, ...]):
        unknown = [c for c in covariates if c not in data.covariate_names]
        if unknown:
            raise FitError(
                f"covariates {unknown} not in the dataset; "
                f"encoded: {list(data.covariate_names)}"
            )
        self.r = data.responses
        cols = [data.covariate_names.index(name) for name in covariates]
        self.X = data.design[:, cols] if cols else np.zeros((data.n_obs, 0))
        self.c = data.cluster_index
        self.J = data.n_clusters
        self.K = data.n_levels
        self.n = data.n_obs
        self.p = self.X.shape[1]
        self.Km1 = self.K - 1
        # threshold selector per observation: index of the upper/lower cut
        self.hi_idx = self.r - 1          # valid where r <= K-1
        self.lo_idx = self.r - 2          # valid where r >= 2
        self.has_hi = self.r <= self.K - 1
        self.has_lo = self.r >= 2
        self.counts = np.bincount(self.c, minlength=self.J).astype(np.float64)
        self.u = np.zeros(self.J)

    # -- per-call evaluation ------------------------------------------------

    def _bounds(self, thresholds, xb, u):
        shift = xb + u[self.c]
        lo_pad, hi_pad = _padded_thresholds(thresholds)
        idx = self.r - 1
        return lo_pad[idx] + shift, hi_pad[idx] + shift

    def _cluster_sum(self, values) -> np.ndarray:
        return np.bincount(self.c, weights=values, minlength=self.J)

    def _threshold_sum(self, upper_w, lower_w) -> np.ndarray:
        """(J, K-1) per-cluster sums of upper_w at hi_idx plus lower_w at lo_idx."""
        out = np.zeros(self.J * self.Km1)
        if self.has_hi.any():
            flat = self.c[self.has_hi] * self.Km1 + self.hi_idx[self.has_hi]
            out += np.bincount(flat, weights=upper_w[self.has_hi], minlength=out.size)
        if self.has_lo.any():
            flat = self.c[self.has_lo] * self.Km1 + self.lo_idx[self.has_lo]
            out += np.bincount(flat, weights=lower_w[self.has_lo], minlength=out.size)
        return out.reshape(self.J, self.Km1)

    def _design_sum(self, weights) -> np.ndarray:
        """(J, p) per-cluster sums of weights * x."""
        out = np.empty((self.J, self.p))
        for col in range(self.p):
            out[:, col] = self._cluster_sum(weights * self.X[:, col])
        return out

    def find_modes(self, params: ParamVector, warm_start: bool = True):
        """Locate all cluster modes at once by safeguarded Newton on g'.

        g' is strictly decreasing in u (the integrand is strictly concave),
        and |s_i| < 1 bounds the root inside [-tau n_j - 1, tau n_j + 1], so
        each cluster keeps a sign bracket on g'; Newton steps that leave the
        bracket fall back to bisection.
        """
        tau = params.tau00
        if params.beta.size != self.p:
            raise FitError(f"expected {self.p} slopes, got {params.beta.size}")
        xb = self.X @ params.beta if self.p else np.zeros(self.n)
        width = tau * self.counts + 1.0
        b_lo = -width
        b_hi = width.copy()
        u = np.clip(self.u, b_lo, b_hi) if warm_start else np.zeros(self.J)

        for sweep in range(MODE_MAX_ITER + 150):
            lo, hi = self._bounds(params.thresholds, xb, u)
            parts = _logistic_parts(lo, hi)
            Fa, Fb, fa, fb = parts
            d1 = self._cluster_sum(1.0 - Fa - Fb) - u / tau
            d2 = -self._cluster_sum(fa + fb) - 1.0 / tau
            if not np.isfinite(d1).all():
                raise FitError("non-finite mode gradient; parameters out of range")
            positive = d1 > 0
            b_lo = np.where(positive, u, b_lo)
            b_hi = np.where(positive, b_hi, u)
            active = np.abs(d1) > MODE_TOL
            if not active.any():
                break
            newton = u - d1 / d2
            inside = (newton > b_lo) & (newton < b_hi)
            # past the Newton budget, force bisection to guarantee progress
            if sweep >= MODE_MAX_ITER:
                inside = np.zeros_like(inside)
            u = np.where(active, np.where(inside, newton, 0.5 * (b_lo + b_hi)), u)
        else:
            worst = int(np.argmax(np.abs(d1)))
            raise ClusterConvergenceError(
                f"cluster {worst}: mode search stalled with |g'| = {abs(d1[worst]):.3g}"
            )
        self.u = u
        # lo, hi, and parts were computed at the accepted u
        g = (
            self._cluster_sum(_log_prob(lo, hi))
            - u**2 / (2.0 * tau)
            - 0.5 * math.log(2.0 * math.pi * tau)
        )
        return u, g, lo, hi, xb, parts

    def loglik(self, params: ParamVector) -> float:
        u, g, lo, hi, _, parts = self.find_modes(params)
        _, _, fa, fb = parts
        d2 = -self._cluster_sum(fa + fb) - 1.0 / params.tau00
        return float(np.sum(g + 0.5 * LOG_2PI - 0.5 * np.log(-d2)))

    def loglik_and_grad(self, params: ParamVector):
        """Laplace log-likelihood and its exact gradient on the reported scale.

        The gradient differentiates through each cluster mode: the envelope
        term needs only the direct partials of g, while the curvature term
        -log(-g'')/2 picks up g''' times the implicit mode sensitivity
        du_hat/dzeta = -g_{u,zeta}/g''.
        """
        tau = params.tau00
        u, g, lo, hi, xb, parts = self.find_modes(params)
        Fa, Fb, fa, fb = parts
        fpa = fa * (1.0 - 2.0 * Fa)
        fpb = fb * (1.0 - 2.0 * Fb)
        s = 1.0 - Fa - Fb
        h = fa + fb
        Ra, Rb = _threshold_ratios(lo, hi)

        d2 = -self._cluster_sum(h) - 1.0 / tau          # g'' per cluster
        d3 = -self._cluster_sum(fpa + fpb)               # g''' per cluster
        loglik = float(np.sum(g + 0.5 * LOG_2PI - 0.5 * np.log(-d2)))

        # direct partials of g at the mode
        dg_dtheta = self._threshold_sum(Rb, -Ra)                      # (J, K-1)
        dg_dbeta = self._design_sum(s)                                # (J, p)
        dg_dtau = u**2 / (2.0 * tau**2) - 1.0 / (2.0 * tau)           # (J,)
        # cross partials of g' (for the implicit mode shift)
        du_dtheta = -self._threshold_sum(-fb, -fa) / d2[:, None]
        du_dbeta = -self._design_sum(-h) / d2[:, None]
        du_dtau = -(u / tau**2) / d2
        # direct partials of g''
        dd2_dtheta = -self._threshold_sum(fpb, fpa)
        dd2_dbeta = -self._design_sum(fpa + fpb)
        dd2_dtau = 1.0 / tau**2

        scale = -0.5 / d2
        grad_theta = (dg_dtheta + scale[:, None] * (d3[:, None] * du_dtheta + dd2_dtheta)).sum(0)
        grad_beta = (dg_dbeta + scale[:, None] * (d3[:, None] * du_dbeta + dd2_dbeta)).sum(0)
        grad_tau = float((dg_dtau + scale * (d3 * du_dtau + dd2_dtau)).sum())
        return loglik, grad_theta, grad_beta, grad_tau

    # -- independent-observations boundary (tau00 = 0) ----------------------

    def fixed_loglik_and_grad(self, thresholds, beta):
        xb = self.X @ beta if self.p else np.zeros(self.n)
        lo, hi = self._bounds(thresholds, xb, np.zeros(self.J))
        loglik = float(_log_prob(lo, hi).sum())
        Fa, Fb, _, _ = _logistic_parts(lo, hi)
        Ra, Rb = _threshold_ratios(lo, hi)
        grad_theta = np.zeros(self.Km1)
        if self.has_hi.any():
            np.add.at(grad_theta, self.hi_idx[self.has_hi], Rb[self.has_hi])
        if self.has_lo.any():
            np.add.at(grad_theta, self.lo_idx[self.has_lo], -Ra[self.has_lo])
        s = 1.0 - Fa - Fb
        grad_beta = self.X.T @ s if self.p else np.zeros(0)
        return loglik, grad_theta, grad_beta


def total_minus2ll(params: ParamVector, data: EncodedDataset, covariates=None) -> float:
    """Deviance -2 sum_j l_j of the Laplace marginal log-likelihood.

    At the tau00 = 0 boundary this is the independent-observations ordinal
    logistic deviance (the random intercept degenerates to zero).
    """
    if covariates is None:
        covariates = data.covariate_names
    core = _LaplaceCore(data, tuple(covariates))
    if params.tau00 <= TAU_FLOOR:
        loglik, _, _ = core.fixed_loglik_and_grad(params.thresholds, params.beta)
        return -2.0 * loglik
    return -2.0 * core.loglik(params)


def total_ghq_minus2ll(
    params: ParamVector, data: EncodedDataset, nodes: int, covariates=None
) -> float:
    """Deviance under adaptive Gauss-Hermite quadrature (validation oracle)."""
    if covariates is None:
        covariates = data.covariate_names
    cols = [data.covariate_names.index(name) for name in covariates]
    X = data.design[:, cols] if cols else np.zeros((data.n_obs, 0))
    total = 0.0
    for j in range(data.n_clusters):
        members = data.cluster_index == j
        cluster = ClusterData(data.responses[members], X[members])
        total += ghq_cluster_loglik(params, cluster, nodes)
    return -2.0 * total


# ---------------------------------------------------------------------------
# parameterization helpers
# ---------------------------------------------------------------------------

def _pack(params: ParamVector) -> np.ndarray:
    th = params.thresholds
    alphas = np.log(np.diff(th)) if th.size >= 2 else np.zeros(0)
    tau = max(params.tau00, TAU_FLOOR)
    return np.concatenate(([th[0]], alphas, params.beta, [math.log(tau)]))


def _unpack(z: np.ndarray, n_thresholds: int, n_beta: int) -> ParamVector:
    th = np.empty(n_thresholds)
    th[0] = z[0]
    if n_thresholds >= 2:
        th[1:] = z[0] + np.cumsum(np.exp(z[1:n_thresholds]))
    beta = z[n_thresholds : n_thresholds + n_beta]
    return ParamVector(thresholds=th, beta=beta, tau00=math.exp(z[-1]))


def _chain_gradient(z, grad_theta, grad_beta, grad_tau, n_thresholds):
    """Map the reported-scale gradient to the unconstrained coordinates."""
    gz = np.empty(z.size)
    gz[0] = grad_theta.sum()
    for m in range(1, n_thresholds):
        gz[m] = math.exp(z[m]) * grad_theta[m:].sum()
    gz[n_thresholds : n_thresholds + grad_beta.size] = grad_beta
    gz[-1] = math.exp(z[-1]) * grad_tau
    return gz


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def _check_levels(data: EncodedDataset):
    seen = np.bincount(data.responses, minlength=data.n_levels + 1)[1:]
    missing = [k + 1 for k, n in enumerate(seen) if n == 0]
    if missing:
        raise FitError(
            f"response levels {missing} unobserved; thresholds are unidentifiable"
        )


def fit_fixed_effects(
    spec: ModelSpec,
    data: EncodedDataset,
    tol: float = 1e-10,
    max_iter: int = 500,
) -> FitResult:
    """Ordinal logistic fit with no random intercept (the tau00 = 0 boundary)."""
    if spec.n_levels != data.n_levels:
        raise FitError(f"spec has {spec.n_levels} levels but data has {data.n_levels}")
    _check_levels(data)
    core = _LaplaceCore(data, spec.covariates)
    Km1 = spec.n_thresholds

    cum = np.cumsum(np.bincount(data.responses, minlength=data.n_levels + 1)[1:-1])
    frac = np.clip(cum / data.n_obs, 1e-6, 1 - 1e-6)
    th0 = np.log(frac / (1 - frac))
    th0 = np.maximum.accumulate(th0 + 1e-9 * np.arange(Km1))
    for m in range(1, Km1):  # enforce strict increase for the log-diff transform
        if th0[m] <= th0[m - 1]:
            th0[m] = th0[m - 1] + 1e-6
    z0 = np.concatenate(([th0[0]], np.log(np.diff(th0)) if Km1 >= 2 else [], np.zeros(core.p)))

    def objective(z):
        th = np.empty(Km1)
        th[0] = z[0]
        if Km1 >= 2:
            th[1:] = z[0] + np.cumsum(np.exp(z[1:Km1]))
        beta = z[Km1:]
        ll, gt, gb = core.fixed_loglik_and_grad(th, beta)
        gz = np.empty(z.size)
        gz[0] = gt.sum()
        for m in range(1, Km1):
            gz[m] = math.exp(z[m]) * gt[m:].sum()
        gz[Km1:] = gb
        return -2.0 * ll, -2.0 * gz

    res = minimize(
        objective,
        z0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": tol, "gtol": 1e-7},
    )
    th = np.empty(Km1)
    th[0] = res.x[0]
    if Km1 >= 2:
        th[1:] = res.x[0] + np.cumsum(np.exp(res.x[1:Km1]))
    estimates = ParamVector(thresholds=th, beta=res.x[Km1:], tau00=0.0)
    grad_norm = float(np.max(np.abs(res.jac)))
    se = _fixed_effect_se(core, res.x, Km1)
    return FitResult(
        spec=spec,
        estimates=estimates,
        se_thresholds=se[:Km1],
        se_beta=se[Km1:],
        se_tau00=float("nan"),
        minus2ll=float(res.fun),
        converged=bool(res.success),
        iterations=int(res.nit),
        gradient_norm=grad_norm,
        n_obs=data.n_obs,
    )


def _fixed_effect_se(core, z_opt, Km1):
    def grad(z):
        th = np.empty(Km1)
        th[0] = z[0]
        if Km1 >= 2:
            th[1:] = z[0] + np.cumsum(np.exp(z[1:Km1]))
        _, gt, gb = core.fixed_loglik_and_grad(th, z[Km1:])
        gz = np.empty(z.size)
        gz[0] = gt.sum()
        for m in range(1, Km1):
            gz[m] = math.exp(z[m]) * gt[m:].sum()
        gz[Km1:] = gb
        return -gz

    hess = _numeric_jacobian(grad, z_opt)
    jac = np.eye(z_opt.size)
    for m in range(1, Km1):
        jac[m, 1 : m + 1] = np.exp(z_opt[1 : m + 1])
        jac[m, 0] = 1.0
    cov_z = _safe_inverse(0.5 * (hess + hess.T))
    cov = jac @ cov_z @ jac.T
    diag = np.diag(cov).copy()
    diag[diag < 0] = np.nan
    return np.sqrt(diag)


def _numeric_jacobian(func, x, step: float = 1e-5):
    n = x.size
    out = np.empty((n, n))
    for i in range(n):
        hi = step * max(1.0, abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += hi
        xm[i] -= hi
        out[:, i] = (func(xp) - func(xm)) / (2.0 * hi)
    return out


def _safe_inverse(mat):
    try:
        return np.linalg.inv(mat)
    except np.linalg.LinAlgError:
        warnings.warn("observed information is singular; using pseudo-inverse")
        return np.linalg.pinv(mat)


def fit(
    spec: ModelSpec,
    data: EncodedDataset,
    tol: float = 1e-8,
    max_iter: int = 200,
    init: ParamVector | None = None,
    compute_se: bool = True,
) -> FitResult:
    """Maximize the Laplace marginal likelihood of the random-intercept model.

    The outer problem runs L-BFGS-B on the unconstrained coordinates with the
    analytic gradient, then polishes with Newton steps (numeric Hessian of the
    gradient) until the -2LL gradient norm is below 1e-5.  Standard errors
    invert the negative numeric Hessian of the Laplace log-likelihood at the
    optimum and map to the reported scale by the delta method.  A log-tau00
    floor at tau00 = 1e-10 stands in for the boundary fit.
    """
    if data.n_obs == 0:
        raise FitError("empty dataset")
    if spec.n_levels != data.n_levels:
        raise FitError(f"spec has {spec.n_levels} levels but data has {data.n_levels}")
    _check_levels(data)
    core = _LaplaceCore(data, spec.covariates)
    Km1 = spec.n_thresholds

    if init is None:
        base = fit_fixed_effects(spec, data)
        init = ParamVector(
            thresholds=base.estimates.thresholds, beta=base.estimates.beta, tau00=0.1
        )
    elif init.tau00 <= 0:
        init = ParamVector(thresholds=init.thresholds, beta=init.beta, tau00=0.1)
    z0 = _pack(init)
    n_params = z0.size

    log_tau_lo = math.log(TAU_FLOOR)
    bounds = [(None, None)] * (n_params - 1) + [(log_tau_lo, 40.0)]

    def objective(z):
        params = _unpack(z, Km1, core.p)
        ll, gt, gb, gtau = core.loglik_and_grad(params)
        gz = _chain_gradient(z, gt, gb, gtau, Km1)
        if not math.isfinite(ll) or not np.isfinite(gz).all():
            # keep the line search away from this region
            return 1e30, np.zeros_like(gz)
        return -2.0 * ll, -2.0 * gz

    f0, _ = objective(z0)
    if not f0 < 1e30:
        raise FitError("non-finite likelihood at the initial parameters")

    res = minimize(
        objective,
        z0,
        jac=True,
        method="L-BFGS-B",
        bounds=bounds,
        options={"maxiter": max_iter, "ftol": tol, "gtol": GRAD_NORM_TOL / 2},
    )
    z = res.x
    iterations = int(res.nit)
    hit_max_iter = res.status == 1

    def proj_norm(z_vec, grad):
        g = grad.copy()
        if z_vec[-1] <= log_tau_lo + 1e-12 and g[-1] > 0:
            g[-1] = 0.0
        return float(np.max(np.abs(g)))

    f_val, g_val = objective(z)
    hess = None
    for _ in range(12):
        if proj_norm(z, g_val) <= GRAD_NORM_TOL or hit_max_iter:
            break
        # a variance flowing to zero decelerates geometrically in log space;
        # once tau00 is below 1e-4 and still pushed down, jump to the floor
        # (only kept if downhill) and polish the free coordinates there
        if log_tau_lo + 1e-12 < z[-1] < math.log(1e-4) and g_val[-1] > 0:
            z_try = z.copy()
            z_try[-1] = log_tau_lo
            f_try, g_try = objective(z_try)
            if f_try <= f_val + 1e-9:
                z, f_val, g_val = z_try, f_try, g_try
                iterations += 1
                continue
        free = np.ones(n_params, dtype=bool)
        if z[-1] <= log_tau_lo + 1e-12 and g_val[-1] > 0:
            free[-1] = False
        hess = _numeric_jacobian(lambda zz: objective(zz)[1], z)
        hess = 0.5 * (hess + hess.T)
        step = np.zeros(n_params)
        try:
            step[free] = np.linalg.solve(hess[np.ix_(free, free)], -g_val[free])
        except np.linalg.LinAlgError:
            break
        improved = False
        for _ in range(30):
            z_try = z + step
            z_try[-1] = max(z_try[-1], log_tau_lo)
            f_try, g_try = objective(z_try)
            if f_try <= f_val + 1e-9:
                z, f_val, g_val = z_try, f_try, g_try
                improved = True
                break
            step *= 0.5
        iterations += 1
        if not improved:
            break
        hess = None  # stale after moving

    grad_norm = proj_norm(z, g_val)
    converged = (not hit_max_iter) and grad_norm <= GRAD_NORM_TOL
    estimates = _unpack(z, Km1, core.p)
    if estimates.tau00 <= TAU_FLOOR * 1.01:
        # variance pinned at the floor: report the boundary (fixed-effects) fit
        estimates = ParamVector(
            thresholds=estimates.thresholds, beta=estimates.beta, tau00=0.0
        )
        ll_boundary, _, _ = core.fixed_loglik_and_grad(
            estimates.thresholds, estimates.beta
        )
        f_val = -2.0 * ll_boundary

    se_th = np.full(Km1, np.nan)
    se_beta = np.full(core.p, np.nan)
    se_tau = float("nan")
    if compute_se:
        if hess is None:
            hess = _numeric_jacobian(lambda zz: objective(zz)[1], z)
            hess = 0.5 * (hess + hess.T)
        # hess is d2(-2LL)/dz2; the observed information is half of it
        cov_z = _safe_inverse(0.5 * hess)
        jac = np.eye(n_params)
        for m in range(1, Km1):
            jac[m, 0] = 1.0
            jac[m, 1 : m + 1] = np.exp(z[1 : m + 1])
        jac[-1, -1] = math.exp(z[-1])  # d tau / d log tau
        cov = jac @ cov_z @ jac.T
        diag = np.diag(cov).copy()
        diag[diag < 0] = np.nan
        se = np.sqrt(diag)
        se_th = se[:Km1]
        se_beta = se[Km1:-1]
        se_tau = float(se[-1])

    return FitResult(
        spec=spec,
        estimates=estimates,
        se_thresholds=se_th,
        se_beta=se_beta,
        se_tau00=se_tau,
        minus2ll=float(f_val),
        converged=converged,
        iterations=iterations,
        gradient_norm=grad_norm,
        n_obs=data.n_obs,
    )
