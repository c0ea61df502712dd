"""Posterior and posterior-predictive summaries of a :class:`DrawStore`."""
from __future__ import annotations

import csv
import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from .data import GapTimeDataset
from .model import ar_mean
from .store import DrawStore

QUANTILES = (0.05, 0.5, 0.95)
MIN_DIAGNOSTIC_DRAWS = 100
SCALAR_NAMES = ("sigma", "tau", "M", "p", "K", "w_last")


class SummaryError(ValueError):
    """Raised when a summary cannot be computed from the given draws."""


def _require_draws(store: DrawStore) -> None:
    if store.n_draws == 0:
        raise SummaryError("draw store is empty")


def _histogram(values) -> dict[int, float]:
    counts = Counter(int(v) for v in values)
    n = sum(counts.values())
    return {k: counts[k] / n for k in sorted(counts)}


def k_posterior(store: DrawStore) -> dict[int, float]:
    """Posterior frequencies of the number of occupied clusters."""
    _require_draws(store)
    return _histogram(store.K)


def p_posterior(store: DrawStore) -> dict[int, float]:
    """Posterior frequencies of the autoregressive order."""
    _require_draws(store)
    return _histogram(store.p)


def inclusion_probabilities(store: DrawStore) -> np.ndarray:
    """Posterior mean weight of mixture atoms that use each lag."""
    _require_draws(store)
    return store.inclusion.mean(axis=0)


def conditional_k_posterior(store: DrawStore, p: int) -> dict[int, float]:
    """K frequencies among draws with order ``p``; empty if none."""
    _require_draws(store)
    keep = store.p == p
    return _histogram(store.K[keep]) if keep.any() else {}


# --------------------------------------------------------------- densities

@dataclass
class AtomDensity:
    """Predictive draws of one atom coordinate with a kernel-smoothed density.

    ``grid`` and ``density`` are empty when all draws coincide; ``modes``
    then holds that single value.
    """

    lag: int
    draws: np.ndarray
    quantiles: dict[float, float]
    bandwidth: float
    grid: np.ndarray
    density: np.ndarray
    modes: list[float]
    skewness: float | None

    @property
    def n_modes(self) -> int:
        return len(self.modes)

    def mass_within(self, lo: float, hi: float) -> float:
        return float(np.mean((self.draws > lo) & (self.draws < hi)))


def silverman_bandwidth(x) -> float:
    x = np.asarray(x, dtype=float)
    sd = x.std(ddof=1) if x.size > 1 else 0.0
    iqr = np.subtract(*np.percentile(x, [75, 25]))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    return 0.9 * spread * x.size ** (-0.2)


def find_modes(grid, density, rel_height: float = 0.05) -> list[float]:
    """Interior local maxima of ``density`` at least ``rel_height`` of its peak."""
    d = np.asarray(density)
    if d.size < 3:
        return [float(grid[int(np.argmax(d))])]
    up = np.r_[True, d[1:] > d[:-1]]
    down = np.r_[d[:-1] >= d[1:], True]
    peaks = np.flatnonzero(up & down & (d >= rel_height * d.max()))
    return [float(grid[k]) for k in peaks]


def kde(x, grid, bandwidth) -> np.ndarray:
    z = (np.asarray(grid)[:, None] - np.asarray(x)[None, :]) / bandwidth
    return np.exp(-0.5 * z * z).sum(axis=1) / (x.size * bandwidth * np.sqrt(2 * np.pi))


def predictive_atom_density(store: DrawStore, lag: int, grid_size: int = 512,
                            rel_height: float = 0.05) -> AtomDensity:
    """Smoothed predictive density of atom coordinate ``lag`` (0 is the intercept)."""
    _require_draws(store)
    if not 0 <= lag < store.atoms.shape[1]:
        raise SummaryError(f"lag {lag} outside 0..{store.atoms.shape[1] - 1}")
    x = store.atoms[:, lag].astype(float)
    qs = dict(zip(QUANTILES, (float(v) for v in np.quantile(x, QUANTILES))))
    bw = silverman_bandwidth(x)
    if not bw > 0:
        return AtomDensity(lag, x, qs, 0.0, np.zeros(0), np.zeros(0), [float(x[0])], None)
    lo, hi = x.min() - 3 * bw, x.max() + 3 * bw
    if lag > 0:
        # kernels are not renormalized, so near +-1 the grid carries less than unit mass
        lo, hi = max(lo, -1.0), min(hi, 1.0)
    grid = np.linspace(lo, hi, grid_size)
    dens = kde(x, grid, bw)
    return AtomDensity(lag, x, qs, float(bw), grid, dens, find_modes(grid, dens, rel_height),
                       float(stats.skew(x)))


# ------------------------------------------------------------- regression

def beta_credible_intervals(store: DrawStore, level: float = 0.95) -> np.ndarray:
    """Equal-tailed intervals, shape J x q x 2 (lower, upper)."""
    _require_draws(store)
    a = (1.0 - level) / 2.0
    q = np.quantile(store.beta, [a, 1.0 - a], axis=0)
    return np.moveaxis(q, 0, -1)


def empirical_mode_profile(dataset: GapTimeDataset) -> np.ndarray:
    """Typical covariate row for each gap position, shape J x q.

    Binary and categorical columns take their most frequent value among
    subjects with that gap; numeric columns take the median. Without a
    codec, columns holding only 0/1 are treated as binary.
    """
    _, mask, X, _ = dataset.padded()
    J, q = mask.shape[1], dataset.q
    out = np.zeros((J, q))
    cols = dataset.codec.columns
    if cols:
        blocks, start = [], 0
        for c in cols:
            width = len(c.output_names())
            blocks.append((c.kind, slice(start, start + width)))
            start += width
    else:
        blocks = [(None, slice(r, r + 1)) for r in range(q)]
    for j in range(J):
        rows = X[mask[:, j], j] if mask[:, j].any() else X[mask]
        for kind, sl in blocks:
            vals = rows[:, sl]
            if kind is None:
                kind = "binary" if np.all(np.isin(vals, (0.0, 1.0))) else "numeric"
            if kind == "numeric":
                out[j, sl] = np.median(vals, axis=0)
            else:
                common, _ = Counter(map(tuple, vals)).most_common(1)[0]
                out[j, sl] = common
    return out


def predictive_gap_trajectory(store: DrawStore, covariates, horizon: int | None = None,
                              seed=None) -> np.ndarray:
    """Posterior predictive log gaps of a new subject, shape n_draws x horizon.

    For every retained draw the stored predictive atom is used to
    forward-simulate alpha and Y for positions 1..horizon with that draw's
    beta, sigma and tau. ``covariates`` is a q-vector (same row for every
    gap) or a horizon x q matrix.
    """
    _require_draws(store)
    horizon = store.J if horizon is None else int(horizon)
    if horizon < 1:
        raise SummaryError("horizon must be at least 1")
    if horizon > store.J:
        raise SummaryError(f"horizon {horizon} exceeds the {store.J} gap positions of the fit")
    x = np.asarray(covariates, dtype=float)
    if x.ndim == 1:
        x = np.broadcast_to(x, (horizon, x.size))
    if x.shape != (horizon, store.q):
        raise SummaryError(f"covariate profile has shape {x.shape}, expected ({horizon}, {store.q})")
    rng = np.random.default_rng(seed)
    n = store.n_draws
    theta = store.atoms
    xb = np.einsum("jq,njq->nj", x, store.beta[:, :horizon])
    Y = np.zeros((n, horizon))
    for j in range(horizon):
        alpha = ar_mean(theta, Y, j, store.dependence) + store.tau * rng.standard_normal(n)
        Y[:, j] = xb[:, j] + alpha + store.sigma * rng.standard_normal(n)
    return Y


# ------------------------------------------------------------ diagnostics

def _autocov(x) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, size)
    return np.fft.irfft(f * np.conj(f), size)[:n] / n


def integrated_time(x) -> float:
    """Integrated autocorrelation time by the initial monotone sequence rule.

    Returns NaN for a constant series.
    """
    x = np.asarray(x, dtype=float)
    g = _autocov(x)
    if not g[0] > 0:
        return float("nan")
    m = (x.size - 1) // 2
    pairs = g[0:2 * m:2] + g[1:2 * m + 1:2]
    neg = np.flatnonzero(pairs <= 0)
    pairs = pairs[:neg[0]] if neg.size else pairs
    if pairs.size == 0:
        return 1.0
    pairs = np.minimum.accumulate(pairs)
    return float(max(-1.0 + 2.0 * pairs.sum() / g[0], 1.0 / x.size))


def ess(x) -> float:
    """Effective sample size, capped at the series length; NaN if constant."""
    x = np.asarray(x, dtype=float)
    t = integrated_time(x)
    return float("nan") if np.isnan(t) else float(min(x.size / t, x.size))


def geweke_z(x, first: float = 0.1, last: float = 0.5) -> float:
    """Difference of window means over its spectral standard error."""
    x = np.asarray(x, dtype=float)
    n = x.size
    a = x[: int(first * n)]
    b = x[n - int(last * n):]
    va = a.var() * integrated_time(a) / a.size if a.var() > 0 else 0.0
    vb = b.var() * integrated_time(b) / b.size if b.var() > 0 else 0.0
    if va + vb == 0:
        return 0.0 if a.mean() == b.mean() else float("inf")
    return float((a.mean() - b.mean()) / np.sqrt(va + vb))


def split_rhat(chains) -> float:
    """Potential scale reduction with every chain split in half."""
    chains = [np.asarray(c, dtype=float) for c in np.atleast_2d(chains)]
    n = min(c.size for c in chains) // 2
    if n < 2:
        raise SummaryError("chains too short for R-hat")
    parts = np.array([h for c in chains for h in (c[:n], c[-n:])])
    W = parts.var(axis=1, ddof=1).mean()
    B = n * parts.mean(axis=1).var(ddof=1)
    if W == 0:
        return float("nan")
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


@dataclass
class ScalarDiagnostics:
    ess: float | None
    geweke_z: float | None
    rhat: float | None
    flagged: bool
    note: str = ""


def diagnose_series(chains) -> ScalarDiagnostics:
    """Diagnostics for one scalar given one or more chains of equal role."""
    chains = [np.asarray(c, dtype=float) for c in chains]
    total = sum(c.size for c in chains)
    if min(c.size for c in chains) < MIN_DIAGNOSTIC_DRAWS:
        raise SummaryError(f"need at least {MIN_DIAGNOSTIC_DRAWS} draws per chain")
    if all(np.ptp(c) == 0 for c in chains):
        return ScalarDiagnostics(None, None, None, True, "constant chain")
    e = sum(ess(c) for c in chains if np.ptp(c) > 0)
    z = geweke_z(np.concatenate(chains)) if len(chains) == 1 else max(
        (geweke_z(c) for c in chains), key=abs)
    r = split_rhat(chains)
    r = None if np.isnan(r) else r
    if not np.isfinite(z):
        return ScalarDiagnostics(float(e), None, r, True, "window means differ with zero variance")
    flagged = abs(z) > 3 or (r is not None and r > 1.1) or e < 0.01 * total
    return ScalarDiagnostics(float(e), float(z), r, bool(flagged))


def diagnostics(stores) -> dict[str, ScalarDiagnostics]:
    """Per-scalar ESS, Geweke z and split R-hat over one or several chains."""
    if isinstance(stores, DrawStore):
        stores = [stores]
    for s in stores:
        if s.n_draws < MIN_DIAGNOSTIC_DRAWS:
            raise SummaryError(
                f"diagnostics need at least {MIN_DIAGNOSTIC_DRAWS} draws, got {s.n_draws}")
    return {name: diagnose_series([getattr(s, name) for s in stores]) for name in SCALAR_NAMES}


# ----------------------------------------------------------------- report

def _scalar_summary(x) -> dict:
    x = np.asarray(x, dtype=float)
    q05, q50, q95 = np.quantile(x, QUANTILES)
    lo, hi = np.quantile(x, [0.025, 0.975])
    return {"mean": float(x.mean()), "median": float(q50), "q05": float(q05),
            "q95": float(q95), "ci95": [float(lo), float(hi)]}


@dataclass
class PosteriorSummary:
    n_draws: int
    scalars: dict[str, dict]
    k_hist: dict[int, float]
    p_hist: dict[int, float]
    inclusion: list[float]
    atoms: list[dict]
    beta: list[dict]
    diagnostics: dict[str, dict] = field(default_factory=dict)
    truncation: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["k_hist"] = {str(k): v for k, v in self.k_hist.items()}
        d["p_hist"] = {str(k): v for k, v in self.p_hist.items()}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n"


def summarize(store: DrawStore, truncation_tol: float = 0.01) -> PosteriorSummary:
    """Collect the standard summaries; diagnostics need 100 or more draws."""
    _require_draws(store)
    scalars = {name: _scalar_summary(getattr(store, name)) for name in SCALAR_NAMES}
    atoms = []
    for lag in range(store.atoms.shape[1]):
        dens = predictive_atom_density(store, lag)
        atoms.append({"lag": lag, **_scalar_summary(dens.draws), "modes": dens.modes,
                      "bandwidth": dens.bandwidth, "skewness": dens.skewness})
    ci = beta_credible_intervals(store)
    names = store.covariate_names or tuple(f"x{r + 1}" for r in range(store.q))
    beta = [{"gap": j + 1, "covariate": names[r], "median": float(np.median(store.beta[:, j, r])),
             "ci95": [float(ci[j, r, 0]), float(ci[j, r, 1])]}
            for j in range(store.J) for r in range(store.q)]
    diag = {}
    if store.n_draws >= MIN_DIAGNOSTIC_DRAWS:
        diag = {k: asdict(v) for k, v in diagnostics(store).items()}
    w_max = float(store.w_last.max())
    return PosteriorSummary(
        n_draws=store.n_draws, scalars=scalars, k_hist=k_posterior(store),
        p_hist=p_posterior(store), inclusion=[float(v) for v in inclusion_probabilities(store)],
        atoms=atoms, beta=beta, diagnostics=diag,
        truncation={"max_last_weight": w_max, "adequate": w_max < truncation_tol},
    )


def write_tables(store: DrawStore, directory, summary: PosteriorSummary | None = None) -> Path:
    """Write ``summary.json`` and CSV tables for histograms, intervals and densities."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    summary = summary or summarize(store)
    (d / "summary.json").write_text(summary.to_json())
    for name, hist in (("k_hist.csv", summary.k_hist), ("p_hist.csv", summary.p_hist)):
        with (d / name).open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("value", "prob"))
            w.writerows((k, repr(v)) for k, v in hist.items())
    with (d / "beta_ci.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("gap", "covariate", "median", "lower", "upper"))
        for row in summary.beta:
            w.writerow((row["gap"], row["covariate"], repr(row["median"]),
                        repr(row["ci95"][0]), repr(row["ci95"][1])))
    with (d / "atom_density.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("lag", "x", "density"))
        for lag in range(store.atoms.shape[1]):
            dens = predictive_atom_density(store, lag)
            for gx, gy in zip(dens.grid, dens.density):
                w.writerow((lag, repr(float(gx)), repr(float(gy))))
    return d
