"""Autoregressive random-effects model for log gap times.

Observation level::

    Y_ij = x_ij . beta_j + alpha_ij + sigma * eps_ij

Random effects are centred on an autoregression in the *observed* past log
gaps, with subject-level coefficients drawn from a Dirichlet process::

    alpha_ij ~ Normal(m0 + sum_l m_l * Y_i,j-l, tau^2)
    (m0, m_1, ..., m_L) ~ G,   G ~ DP(M, G0)
    G0 = Normal(0, sigma_g^2) x TBeta(a_Z, b_Z)^L

With the summary-statistic variant the lag sum is replaced by
``m_1 * f(Y_i1, ..., Y_i,j-1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import log_ndtr

from ._draws import tbeta_logpdf as _tbeta_logpdf
from .data import SubjectRecord

LOG_2PI = math.log(2.0 * math.pi)

SUMMARY_CHOICES = ("last_value", "arithmetic_mean", "geometric_mean")
KINDS = ("summary", "fixed", "spike_slab", "random_order")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    """Prior settings. Defaults follow the vague choices used for the
    simulated scenarios (M random on (0, M0))."""

    beta0_sq: float = 1000.0
    sigma_bound: float = 10.0
    tau_bound: float = 10.0
    sigma_g_sq: float = 10.0
    a_Z: float = 3.0
    b_Z: float = 3.0
    M0: float = 10.0
    M_fixed: float | None = None
    H: int = 30
    # only used with scale_prior="invgamma"
    a_sigma: float = 2.0
    b_sigma: float = 1.0
    a_tau: float = 2.0
    b_tau: float = 1.0

    def __post_init__(self):
        for name in ("beta0_sq", "sigma_bound", "tau_bound", "sigma_g_sq", "a_Z", "b_Z",
                     "M0", "a_sigma", "b_sigma", "a_tau", "b_tau"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if self.M_fixed is not None and not self.M_fixed > 0:
            raise ModelError("M_fixed must be positive")
        if int(self.H) != self.H or self.H < 1:
            raise ModelError("H must be a positive integer")

    @property
    def tbeta_lognorm(self) -> float:
        return (math.lgamma(self.a_Z) + math.lgamma(self.b_Z)
                - math.lgamma(self.a_Z + self.b_Z) + math.log(2.0))


@dataclass(frozen=True)
class DependenceSpec:
    """Which past values enter the random-effect mean.

    kind
        ``"summary"``: one coefficient on ``f(history)``;
        ``"fixed"``: AR(order);
        ``"spike_slab"``: AR(order) with point-mass-at-zero lag coefficients;
        ``"random_order"``: AR(p) with p uniform on {0..order}.
    """

    kind: str = "random_order"
    order: int = 3
    f: str = "last_value"
    spike_scope: str = "atom"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ModelError(f"unknown dependence kind {self.kind!r}")
        if self.f not in SUMMARY_CHOICES:
            raise ModelError(f"unknown summary function {self.f!r}")
        if self.spike_scope not in ("atom", "global"):
            raise ModelError(f"unknown spike scope {self.spike_scope!r}")
        if self.kind == "summary":
            object.__setattr__(self, "order", 1)
        if self.order < 0:
            raise ModelError("order must be >= 0")

    @classmethod
    def summary(cls, f="last_value"):
        return cls("summary", 1, f)

    @classmethod
    def fixed(cls, p):
        return cls("fixed", p)

    @classmethod
    def spike_slab(cls, P, scope="atom"):
        return cls("spike_slab", P, spike_scope=scope)

    @classmethod
    def random_order(cls, P):
        return cls("random_order", P)

    @property
    def n_lags(self) -> int:
        return self.order

    def to_dict(self) -> dict:
        return {"kind": self.kind, "order": self.order, "f": self.f,
                "spike_scope": self.spike_scope}


@dataclass(frozen=True)
class ModelConfig:
    dependence: DependenceSpec = field(default_factory=DependenceSpec)
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    scale_prior: str = "uniform"
    shared_beta: bool = False

    def __post_init__(self):
        if self.scale_prior not in ("uniform", "invgamma"):
            raise ModelError(f"unknown scale prior {self.scale_prior!r}")


@dataclass(frozen=True)
class Atom:
    """Mixture-component parameters: intercept and lag coefficients."""

    m0: float
    m: tuple[float, ...] = ()

    def __post_init__(self):
        m = tuple(float(v) for v in self.m)
        if any(not abs(v) < 1.0 for v in m):
            raise ModelError(f"lag coefficients must lie in (-1, 1), got {m}")
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "m0", float(self.m0))

    def as_array(self) -> np.ndarray:
        return np.array((self.m0,) + self.m)


@dataclass
class ChainState:
    """All latent quantities of one chain.

    Cluster labels ``z`` are 0-based. ``theta[h]`` holds atom h as
    ``(m0, m_1, ..., m_L)``; ``eta[h, l]`` is the inclusion indicator of
    lag l+1 in atom h (all true unless the spike-and-slab prior is used).
    ``alpha`` is N x J and zero outside each subject's gaps.
    """

    beta: np.ndarray
    alpha: np.ndarray
    z: np.ndarray
    V: np.ndarray
    theta: np.ndarray
    eta: np.ndarray
    c: np.ndarray
    p: int
    M: float
    sigma: float
    tau: float
    y_imputed: np.ndarray

    @property
    def H(self) -> int:
        return self.theta.shape[0]

    @property
    def weights(self) -> np.ndarray:
        return stick_weights(self.V)

    @property
    def K(self) -> int:
        return int(np.unique(self.z).size)

    def effective_theta(self) -> np.ndarray:
        """Atoms with lag coefficients beyond the active order set to zero."""
        th = self.theta.copy()
        th[:, 1 + self.p:] = 0.0
        return th

    def atom(self, h: int) -> Atom:
        th = self.effective_theta()[h]
        return Atom(th[0], tuple(th[1:]))

    def copy(self) -> "ChainState":
        return replace(self, **{k: np.array(v, copy=True) for k, v in vars(self).items()
                                if isinstance(v, np.ndarray)})


def stick_weights(V) -> np.ndarray:
    """Truncated stick-breaking weights; the last weight takes the remainder."""
    V = np.asarray(V, dtype=float)
    rest = np.concatenate(([1.0], np.cumprod(1.0 - V)))
    w = np.empty(V.size + 1)
    w[:-1] = V * rest[:-1]
    w[-1] = rest[-1]
    return w


def obs_mean(x, beta_j, alpha_ij) -> float:
    """Mean of a log gap time: x . beta_j + alpha_ij."""
    x = np.asarray(x, dtype=float)
    beta_j = np.asarray(beta_j, dtype=float)
    if x.shape != beta_j.shape:
        raise ModelError(f"covariate shape {x.shape} does not match coefficients {beta_j.shape}")
    return float(x @ beta_j) + float(alpha_ij)


def summary_f(history, f_choice: str = "last_value") -> float:
    """Summary of the past log gaps used by the AR(1)-type structures.

    The geometric choice is the sign-preserving power mean
    ``sign(prod) * |prod| ** (1 / n)``, so negative log gaps are allowed.
    """
    h = np.asarray(history, dtype=float)
    if h.size == 0:
        raise ModelError("empty history: the first gap has no autoregressive term")
    if f_choice == "last_value":
        return float(h[-1])
    if f_choice == "arithmetic_mean":
        return float(h.mean())
    if f_choice == "geometric_mean":
        if np.any(h == 0):
            return 0.0
        sign = np.prod(np.sign(h))
        return float(sign * math.exp(np.log(np.abs(h)).mean()))
    raise ModelError(f"unknown summary function {f_choice!r}")


def alpha_conditional_mean(atom: Atom, history, spec: DependenceSpec, p: int | None = None) -> float:
    """Prior mean of alpha_ij given the observed past ``history`` (oldest first).

    Lags beyond the available history are dropped, so the first gap gets m0.
    """
    history = np.asarray(history, dtype=float)
    if history.size == 0:
        return atom.m0
    if spec.kind == "summary":
        return atom.m0 + atom.m[0] * summary_f(history, spec.f)
    order = spec.order if p is None else p
    p_eff = min(order, history.size, len(atom.m))
    recent = history[::-1][:p_eff]
    return atom.m0 + float(np.dot(atom.m[:p_eff], recent))


def lag_design(Y, mask, spec: DependenceSpec) -> np.ndarray:
    """Regressors of the random-effect mean for every (subject, gap).

    Returns an N x J x (1 + L) array: a column of ones for m0 followed by
    the lagged (or summarized) log gaps, zero where a lag is unavailable
    and on padding positions.
    """
    Y = np.where(mask, Y, 0.0)
    N, J = Y.shape
    L = spec.n_lags
    out = np.zeros((N, J, 1 + L))
    out[:, :, 0] = 1.0
    if spec.kind == "summary":
        if J > 1:
            past = Y[:, :-1]
            if spec.f == "last_value":
                s = past
            elif spec.f == "arithmetic_mean":
                s = np.cumsum(past, axis=1) / np.arange(1, J)
            else:
                with np.errstate(divide="ignore"):
                    logabs = np.cumsum(np.log(np.abs(past)), axis=1)
                sign = np.cumprod(np.sign(past), axis=1)
                s = np.where(sign == 0, 0.0, sign * np.exp(logabs / np.arange(1, J)))
            out[:, 1:, 1] = s
    else:
        for lag in range(1, min(L, J - 1) + 1):
            out[:, lag:, lag] = Y[:, :-lag]
    out[~mask] = 0.0
    return out


def normal_logpdf(y, mean, sd):
    y = np.asarray(y, dtype=float)
    r = (y - mean) / sd
    return -0.5 * LOG_2PI - np.log(sd) - 0.5 * r * r


def tbeta_logpdf(y, a_Z, b_Z):
    """Log density of TBeta(a_Z, b_Z) on (-1, 1); -inf outside."""
    return _tbeta_logpdf(y, a_Z, b_Z)


def loglik_subject(record: SubjectRecord, beta, alpha_i, sigma: float) -> float:
    """Observed-data log likelihood of one subject given its random effects.

    Parameters
    ----------
    record : SubjectRecord
    beta : array, shape (J, q)
        Per-gap regression coefficients (J at least the subject's gap count).
    alpha_i : array
        Random effects of the subject, one per gap row.
    sigma : float

    Returns
    -------
    float
        Sum of Normal log densities of the observed log gaps, plus the log
        Normal survival probability of the censoring value when censored.
    """
    n = record.n_gaps
    if n == 0:
        return 0.0
    y = record.log_gaps
    beta = np.asarray(beta, dtype=float)
    mu = np.einsum("jq,jq->j", record.covariates, beta[:n]) + np.asarray(alpha_i, float)[:n]
    k = record.n_events
    total = float(np.sum(normal_logpdf(y[:k], mu[:k], sigma)))
    if record.censored:
        total += float(log_ndtr((mu[n - 1] - y[n - 1]) / sigma))
    return total


def alpha_loglik(alpha_i, lags_i, theta, p: int, tau: float) -> float:
    """Log density of a subject's random effects under one atom.

    ``lags_i`` is the subject's slice of :func:`lag_design`; coefficients
    beyond order ``p`` do not enter.
    """
    th = np.asarray(theta, dtype=float).copy()
    th[1 + p:] = 0.0
    mean = lags_i @ th
    return float(np.sum(normal_logpdf(alpha_i, mean, tau)))


def alpha_marginal_variance(m1: float, sigma: float, tau: float, j: int) -> float:
    """Variance of alpha_ij under the AR(1) structure f = last value.

    Marginalizes the observed past with covariates ignored. Unrolling
    ``Var(alpha_j) = tau^2 + m1^2 (Var(alpha_{j-1}) + sigma^2)`` from
    ``Var(alpha_1) = tau^2`` gives::

        tau^2 * sum_{k<j} m1^(2k) + sigma^2 * m1^2 * sum_{k<j-1} m1^(2k)
    """
    if j < 1:
        raise ModelError("gap index must be >= 1")
    if not abs(m1) < 1.0:
        raise ModelError("|m1| >= 1 gives a non-stationary chain")
    r = m1 * m1
    s_tau = sum(r ** k for k in range(j))
    s_sig = sum(r ** k for k in range(j - 1))
    return tau * tau * s_tau + sigma * sigma * r * s_sig


def ar_mean(theta, Y, j: int, spec: DependenceSpec) -> np.ndarray:
    """Row-wise prior mean of alpha at position ``j`` (0-based).

    ``theta`` is n x (1 + L) with lags beyond the order already zeroed and
    ``Y`` holds the simulated past in its first ``j`` columns.
    """
    mean = theta[:, 0].copy()
    L = theta.shape[1] - 1
    if j == 0 or L == 0:
        return mean
    if spec.kind == "summary":
        hist = Y[:, :j]
        if spec.f == "last_value":
            s = hist[:, -1]
        elif spec.f == "arithmetic_mean":
            s = hist.mean(axis=1)
        else:
            s = np.array([summary_f(h, "geometric_mean") for h in hist])
        return mean + theta[:, 1] * s
    for lag in range(1, min(L, j) + 1):
        mean += theta[:, lag] * Y[:, j - lag]
    return mean


def forward_simulate(rng, X, mask, beta, theta_i, spec: DependenceSpec, p: int,
                     sigma: float, tau: float):
    """Draw (alpha, Y) sequentially in j for every subject.

    ``theta_i`` is N x (1 + L): the atom of each subject. Returns two N x J
    arrays, zero on padding positions.
    """
    N, J = mask.shape
    theta_i = np.array(theta_i, dtype=float)
    theta_i[:, 1 + p:] = 0.0
    xb = np.einsum("njq,jq->nj", X, beta) if X.shape[-1] else np.zeros((N, J))
    Y = np.zeros((N, J))
    alpha = np.zeros((N, J))
    for j in range(J):
        mean = ar_mean(theta_i, Y, j, spec)
        a = mean + tau * rng.standard_normal(N)
        y = xb[:, j] + a + sigma * rng.standard_normal(N)
        alpha[:, j] = np.where(mask[:, j], a, 0.0)
        Y[:, j] = np.where(mask[:, j], y, 0.0)
    return alpha, Y
