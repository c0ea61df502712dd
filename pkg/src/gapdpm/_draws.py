"""Low-level random draws shared by the sampler blocks."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr, ndtri_exp

# log(1e-300): below this the truncated mass is treated as an extreme event
LOG_TINY = -690.7755278982137


def _logdiffexp(a, b):
    """log(exp(a) - exp(b)) for a >= b, elementwise."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return a + np.log1p(-np.exp(b - a))


def truncnorm_logmass(mu, sd, lo, hi):
    """log P(lo < X < hi) for X ~ Normal(mu, sd^2)."""
    a = (np.asarray(lo, float) - mu) / sd
    b = (np.asarray(hi, float) - mu) / sd
    flip = a > 0
    lo_s = np.where(flip, -b, a)
    hi_s = np.where(flip, -a, b)
    return _logdiffexp(log_ndtr(hi_s), log_ndtr(lo_s))


def truncnorm(rng, mu, sd, lo=-np.inf, hi=np.inf):
    """Inverse-CDF draws from Normal(mu, sd^2) restricted to (lo, hi).

    Works on arrays. Intervals lying in the upper tail are reflected so the
    CDF is always evaluated in log space on the lower side, which keeps the
    draw accurate several hundred standard deviations out.

    Returns
    -------
    x : ndarray
    n_extreme : int
        Number of draws whose truncated mass fell below 1e-300. Those the
        log-space inverse cannot resolve are placed with an exponential
        tail approximation next to the truncation point.
    """
    mu, sd, lo, hi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mu, sd, lo, hi)))
    a = (lo - mu) / sd
    b = (hi - mu) / sd
    flip = a > 0
    lo_s = np.where(flip, -b, a)
    hi_s = np.where(flip, -a, b)
    la = log_ndtr(lo_s)
    lb = log_ndtr(hi_s)
    u = rng.random(size=mu.shape)
    with np.errstate(divide="ignore", invalid="ignore"):
        logp = lb + np.log(u + (1.0 - u) * np.exp(la - lb))
        z = ndtri_exp(logp)
    z = np.where(flip, -z, z)
    bad = ~np.isfinite(z) | (z < a) | (z > b)
    n_extreme = int(np.count_nonzero(bad | (lb < LOG_TINY)))
    if np.any(bad):
        # exponential approximation to the Normal tail beyond the near edge
        edge = np.where(flip, a, b)
        rate = np.maximum(np.abs(edge), 1.0)
        e = rng.exponential(size=mu.shape) / rate
        alt = np.where(flip, a + e, b - e)
        alt = np.clip(alt, a, b)
        z = np.where(bad, alt, z)
    x = mu + sd * z
    return (x if x.ndim else float(x)), n_extreme


def tbeta_logpdf(y, a, b):
    """Log density of the Beta(a, b) law moved to (-1, 1)."""
    y = np.asarray(y, dtype=float)
    inside = (y > -1.0) & (y < 1.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (y + 1.0) / 2.0
        val = ((a - 1.0) * np.log(u) + (b - 1.0) * np.log1p(-u)
               - _betaln(a, b) - math.log(2.0))
    out = np.where(inside, val, -np.inf)
    return out if out.ndim else float(out)


def _betaln(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def tbeta_logpdf_scalar(y, a, b, lognorm):
    """Fast scalar version; ``lognorm`` is betaln(a, b) + log 2."""
    if not -1.0 < y < 1.0:
        return -math.inf
    u = 0.5 * (y + 1.0)
    return (a - 1.0) * math.log(u) + (b - 1.0) * math.log1p(-u) - lognorm


def tbeta_rvs(rng, a, b, size=None):
    return 2.0 * rng.beta(a, b, size=size) - 1.0


class SliceStats:
    """Counts slice-sampler failures so callers can report them."""

    __slots__ = ("calls", "failures")

    def __init__(self):
        self.calls = 0
        self.failures = 0


def slice_sample(rng, x0, logf, lo=-math.inf, hi=math.inf, width=0.2,
                 max_steps=50, max_shrink=200, stats: SliceStats | None = None):
    """One univariate slice-sampling update with stepping out and shrinkage.

    ``logf`` is evaluated on plain floats; the support is (lo, hi). If the
    shrinkage loop exhausts ``max_shrink`` proposals the current point is
    returned unchanged and the failure is counted.
    """
    if stats is not None:
        stats.calls += 1
    f0 = logf(x0)
    logy = f0 - rng.exponential()
    u = rng.random()
    left = x0 - width * u
    right = left + width
    v = rng.random()
    j = int(max_steps * v)
    k = max_steps - 1 - j
    while j > 0 and left > lo and logf(left) > logy:
        left -= width
        j -= 1
    while k > 0 and right < hi and logf(right) > logy:
        right += width
        k -= 1
    left = max(left, lo)
    right = min(right, hi)
    for _ in range(max_shrink):
        x1 = left + rng.random() * (right - left)
        if x1 <= lo or x1 >= hi:
            continue
        if logf(x1) > logy:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
    if stats is not None:
        stats.failures += 1
    return x0


def categorical_from_logits(rng, logits):
    """Row-wise categorical draws from unnormalized log probabilities."""
    logits = np.asarray(logits, dtype=float)
    m = logits.max(axis=1, keepdims=True)
    p = np.exp(logits - m)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(logits.shape[0]) * cdf[:, -1]
    z = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(z, logits.shape[1] - 1)
