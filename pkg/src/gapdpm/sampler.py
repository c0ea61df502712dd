"""Blocked Gibbs sampler on the truncated stick-breaking representation.

One sweep visits, in this order: censored-gap imputation, random effects,
allocations, sticks, atoms, lag inclusion (spike-and-slab only), order
(random-order only), regression coefficients, sigma, tau and the DP
concentration.
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc, gammaincinv, log_ndtr

from . import _draws
from .data import GapTimeDataset
from .model import (ChainState, DependenceSpec, ModelConfig, forward_simulate, lag_design,
                    stick_weights)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class SamplerError(RuntimeError):
    """A block produced a non-finite value; ``block`` names it."""

    def __init__(self, block: str, message: str, iteration: int | None = None):
        self.block = block
        self.iteration = iteration
        where = f" at sweep {iteration}" if iteration is not None else ""
        super().__init__(f"{block}{where}: {message}")


@dataclass(frozen=True)
class SamplerConfig:
    iterations: int = 20_000
    burn_in: int = 2_000
    thin: int = 10
    seed: int = 0
    chains: int = 1
    slice_width: float = 0.2
    slice_max_steps: int = 50
    joint_atom_move: bool = True
    split_merge: int = 2
    launch_scans: int = 3
    joint_scales: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.thin < 1 or self.burn_in < 0:
            raise ValueError("iterations and thin must be >= 1, burn_in >= 0")
        if self.burn_in >= self.iterations:
            raise ValueError("burn_in must be smaller than iterations")
        if self.chains < 1:
            raise ValueError("chains must be >= 1")
        if self.split_merge < 0 or self.launch_scans < 0:
            raise ValueError("split_merge and launch_scans must be >= 0")

    @property
    def n_draws(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    @classmethod
    def paper_scale(cls, **kw) -> "SamplerConfig":
        return cls(**{"iterations": 251_000, "burn_in": 1_000, "thin": 50, **kw})


class PreparedData:
    """Rectangular arrays derived once from a dataset.

    Positions of censored final gaps hold the log censoring value in ``Y``;
    the sampler replaces them by imputed values via :meth:`filled_y`.
    """

    def __init__(self, Y, mask, X, censored, spec: DependenceSpec):
        mask = np.asarray(mask, dtype=bool)
        self.mask = mask
        self.N, self.J = mask.shape
        X = np.asarray(X, dtype=float)
        self.X = np.where(mask[..., None], X, 0.0)
        self.q = self.X.shape[2]
        self.Y = np.where(mask, np.asarray(Y, dtype=float), 0.0)
        self.censored = np.asarray(censored, dtype=bool)
        self.n_gaps = mask.sum(axis=1)
        if np.any(self.n_gaps == 0):
            raise ValueError("every subject needs at least one gap")
        self.cens_rows = np.flatnonzero(self.censored)
        self.cens_cols = self.n_gaps[self.cens_rows] - 1
        self.log_c = self.Y[self.cens_rows, self.cens_cols]
        self.spec = spec
        self.lags = lag_design(self.Y, mask, spec)
        self.XtX_subj = np.einsum("njd,nje->nde", self.lags, self.lags)
        self.n_obs = int(mask.sum())
        self.XtX_gap = np.einsum("njq,njr->jqr", self.X, self.X)

    @classmethod
    def from_dataset(cls, dataset: GapTimeDataset, spec: DependenceSpec) -> "PreparedData":
        Y, mask, X, censored = dataset.padded()
        return cls(Y, mask, X, censored, spec)

    def filled_y(self, state: ChainState) -> np.ndarray:
        if self.cens_rows.size == 0:
            return self.Y
        Y = self.Y.copy()
        Y[self.cens_rows, self.cens_cols] = state.y_imputed[self.cens_rows]
        return Y

    def xb(self, beta) -> np.ndarray:
        if self.q == 0:
            return np.zeros((self.N, self.J))
        return np.einsum("njq,jq->nj", self.X, beta)


@dataclass
class SamplerStats:
    slice: _draws.SliceStats = field(default_factory=_draws.SliceStats)
    joint_proposed: int = 0
    joint_accepted: int = 0
    spike_proposed: int = 0
    spike_accepted: int = 0
    split_proposed: int = 0
    split_accepted: int = 0
    merge_proposed: int = 0
    merge_accepted: int = 0
    extreme_imputations: int = 0


class GibbsSampler:
    """Holds data, model and RNG; each ``update_*`` mutates a ChainState."""

    def __init__(self, data: PreparedData, model: ModelConfig, config: SamplerConfig | None = None,
                 rng: np.random.Generator | None = None):
        self.data = data
        self.model = model
        self.hyper = model.hyper
        self.spec = model.dependence
        self.config = config or SamplerConfig()
        self.rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        self.stats = SamplerStats()
        self.L = self.spec.n_lags
        self.D = 1 + self.L
        a, b = self.hyper.a_Z, self.hyper.b_Z
        self._tb_lognorm = self.hyper.tbeta_lognorm
        self._tb_mean = (a - b) / (a + b)
        self._tb_prec = (a + b) ** 2 * (a + b + 1) / (4.0 * a * b)

    # ------------------------------------------------------------------ init

    def prior_atoms(self, n: int, eta_row=None):
        """n atoms from the base measure; returns (theta, eta)."""
        h = self.hyper
        th = np.empty((n, self.D))
        th[:, 0] = math.sqrt(h.sigma_g_sq) * self.rng.standard_normal(n)
        th[:, 1:] = _draws.tbeta_rvs(self.rng, h.a_Z, h.b_Z, size=(n, self.L))
        eta = np.ones((n, self.L), dtype=bool)
        if self.spec.kind == "spike_slab":
            if eta_row is None:
                eta = np.ones((n, self.L), dtype=bool)
            else:
                eta = np.broadcast_to(np.asarray(eta_row, dtype=bool), (n, self.L)).copy()
            th[:, 1:] *= eta
        return th, eta

    def initial_state(self) -> ChainState:
        d, h = self.data, self.hyper
        H = h.H
        M = h.M_fixed if h.M_fixed is not None else h.M0 / 2.0
        V = np.clip(self.rng.beta(1.0, M, size=H - 1), 1e-12, 1 - 1e-12)
        theta, eta = self.prior_atoms(H)
        y_imp = np.full(d.N, np.nan)
        y_imp[d.cens_rows] = d.log_c + 0.1
        state = ChainState(
            beta=np.zeros((d.J, d.q)),
            alpha=np.zeros((d.N, d.J)),
            z=self.rng.integers(0, H, size=d.N),
            V=V,
            theta=theta,
            eta=eta,
            c=np.full(self.L, 0.5),
            p=self.L,
            M=float(M),
            sigma=min(1.0, 0.5 * h.sigma_bound),
            tau=min(1.0, 0.5 * h.tau_bound),
            y_imputed=y_imp,
        )
        Yf = d.filled_y(state)
        state.alpha = np.where(d.mask, Yf - d.xb(state.beta), 0.0)
        return state

    def prior_state(self) -> ChainState:
        """A draw of every non-random-effect parameter from the prior.

        ``alpha`` and ``y_imputed`` are left empty; see :func:`simulate_data`.
        """
        d, h = self.data, self.hyper
        H = h.H
        M = h.M_fixed if h.M_fixed is not None else self.rng.uniform(0.0, h.M0)
        V = np.clip(self.rng.beta(1.0, M, size=H - 1), 1e-300, 1 - 1e-16)
        L = self.L
        if self.spec.kind == "spike_slab":
            c = self.rng.random(L)
            if self.spec.spike_scope == "global":
                eta_row = self.rng.random(L) < c
                theta, eta = self.prior_atoms(H, eta_row)
            else:
                theta, _ = self.prior_atoms(H, np.ones(L, dtype=bool))
                eta = self.rng.random((H, L)) < c
                theta[:, 1:] *= eta
        else:
            theta, eta = self.prior_atoms(H)
            c = np.full(L, 0.5)
        p = int(self.rng.integers(0, L + 1)) if self.spec.kind == "random_order" else L
        w = stick_weights(V)
        z = self.rng.choice(H, size=d.N, p=w / w.sum())
        if self.model.shared_beta:
            beta = np.tile(math.sqrt(h.beta0_sq) * self.rng.standard_normal(d.q), (d.J, 1))
        else:
            beta = math.sqrt(h.beta0_sq) * self.rng.standard_normal((d.J, d.q))
        if self.model.scale_prior == "uniform":
            sigma = self.rng.uniform(0.0, h.sigma_bound)
            tau = self.rng.uniform(0.0, h.tau_bound)
        else:
            sigma = math.sqrt(1.0 / self.rng.gamma(h.a_sigma, 1.0 / h.b_sigma))
            tau = math.sqrt(1.0 / self.rng.gamma(h.a_tau, 1.0 / h.b_tau))
        return ChainState(beta=beta, alpha=np.zeros((d.N, d.J)), z=z, V=V, theta=theta,
                          eta=eta, c=c, p=p, M=float(M), sigma=float(sigma), tau=float(tau),
                          y_imputed=np.full(d.N, np.nan))

    # ----------------------------------------------------------- shared bits

    def _alpha_prior_mean(self, state: ChainState) -> np.ndarray:
        th = state.effective_theta()[state.z]
        return np.einsum("njd,nd->nj", self.data.lags, th)

    def _cluster_stats(self, state: ChainState):
        """Per-atom sufficient statistics of the random effects.

        Returns ``(counts, XtX, Xty)`` with shapes (H,), (H, D, D), (H, D).
        """
        d = self.data
        H = state.H
        onehot = np.zeros((d.N, H))
        onehot[np.arange(d.N), state.z] = 1.0
        Xty_subj = np.einsum("njd,nj->nd", d.lags, state.alpha)
        XtX = np.einsum("nh,nde->hde", onehot, d.XtX_subj)
        Xty = onehot.T @ Xty_subj
        return onehot.sum(axis=0).astype(int), XtX, Xty

    def _active(self, state: ChainState) -> np.ndarray:
        """(H, L) mask of lag coefficients that enter the likelihood."""
        act = state.eta.copy()
        act[:, state.p:] = False
        return act

    # ---------------------------------------------------------------- blocks

    def impute_censored(self, state: ChainState) -> None:
        d = self.data
        if d.cens_rows.size == 0:
            return
        r, c = d.cens_rows, d.cens_cols
        xb = np.einsum("nq,nq->n", d.X[r, c], state.beta[c]) if d.q else 0.0
        mu = xb + state.alpha[r, c]
        draws, n_ext = _draws.truncnorm(self.rng, mu, state.sigma, d.log_c, np.inf)
        state.y_imputed[r] = draws
        self.stats.extreme_imputations += n_ext

    def update_alpha(self, state: ChainState) -> None:
        d = self.data
        s2, t2 = state.sigma ** 2, state.tau ** 2
        prec = 1.0 / s2 + 1.0 / t2
        resid = d.filled_y(state) - d.xb(state.beta)
        mean = (resid / s2 + self._alpha_prior_mean(state) / t2) / prec
        draw = mean + self.rng.standard_normal(mean.shape) / math.sqrt(prec)
        state.alpha = np.where(d.mask, draw, 0.0)

    def allocation_logits(self, state: ChainState) -> np.ndarray:
        d = self.data
        th = state.effective_theta()
        a2 = np.sum(state.alpha ** 2, axis=1)
        Xty = np.einsum("njd,nj->nd", d.lags, state.alpha)
        quad = (a2[:, None] - 2.0 * Xty @ th.T
                + np.einsum("hd,nde,he->nh", th, d.XtX_subj, th, optimize=True))
        with np.errstate(divide="ignore"):
            logw = np.log(state.weights)
        return logw[None, :] - quad / (2.0 * state.tau ** 2)

    def update_allocations(self, state: ChainState) -> None:
        state.z = _draws.categorical_from_logits(self.rng, self.allocation_logits(state))

    # ----------------------------------------------------------- split-merge

    def _atom_pattern(self, state: ChainState, h: int) -> np.ndarray:
        """Indices of atom coordinates that enter the likelihood."""
        act = np.zeros(self.L, dtype=bool)
        act[:state.p] = state.eta[h, :state.p]
        return np.concatenate(([0], 1 + np.flatnonzero(act)))

    def _set_gaussian(self, S, idx, t2):
        """Mean and Cholesky factor of the precision of the Gaussian
        approximation to an atom's conditional given subjects ``S``."""
        d, h = self.data, self.hyper
        n = idx.size
        pm = np.full(n, self._tb_mean)
        pp = np.full(n, self._tb_prec)
        pm[0], pp[0] = 0.0, 1.0 / h.sigma_g_sq
        A = d.XtX_subj[S][:, idx][:, :, idx].sum(axis=0)
        b = self._Xty[S][:, idx].sum(axis=0)
        Q = A / t2 + np.diag(pp)
        C = np.linalg.cholesky(Q)
        mean = np.linalg.solve(Q, b / t2 + pp * pm)
        return mean, C

    def _gauss_draw(self, mean, C):
        return mean + np.linalg.solve(C.T, self.rng.standard_normal(mean.size))

    @staticmethod
    def _gauss_logpdf(x, mean, C):
        r = C.T @ (x - mean)
        return float(np.sum(np.log(np.diag(C))) - 0.5 * r @ r - 0.5 * mean.size * LOG_2PI)

    def _g0_logpdf(self, v, idx) -> float:
        """Base-measure log density of the likelihood-relevant coordinates."""
        h = self.hyper
        out = -0.5 * (LOG_2PI + math.log(h.sigma_g_sq)) - 0.5 * v[0] ** 2 / h.sigma_g_sq
        for m in v[1:]:
            out += _draws.tbeta_logpdf_scalar(float(m), h.a_Z, h.b_Z, self._tb_lognorm)
        return out

    def _eta_logprior(self, state: ChainState, pattern) -> float:
        if self.spec.kind != "spike_slab" or self.spec.spike_scope != "atom":
            return 0.0
        c = np.clip(state.c, 1e-300, 1.0 - 1e-16)
        return float(np.sum(np.where(pattern, np.log(c), np.log1p(-c))))

    def _subject_ll(self, S, idx, v, t2) -> np.ndarray:
        """Per-subject log likelihood of alpha up to terms that do not
        depend on the atom."""
        d = self.data
        XtX = d.XtX_subj[S][:, idx][:, :, idx]
        quad = self._a2[S] - 2.0 * self._Xty[S][:, idx] @ v + np.einsum("d,nde,e->n", v, XtX, v)
        return -0.5 * quad / t2

    def _restricted_probs(self, S, idx, va, vb, logwa, logwb, t2) -> np.ndarray:
        """Probability that each subject in ``S`` joins the second atom."""
        la = logwa + self._subject_ll(S, idx, va, t2)
        lb = logwb + self._subject_ll(S, idx, vb, t2)
        return 1.0 / (1.0 + np.exp(np.clip(la - lb, -700.0, 700.0)))

    def _launch(self, S, i, j, idx, logwa, logwb, t2):
        """Random split of ``S`` followed by restricted Gibbs scans.

        Returns a boolean vector: True for subjects launched into the second
        cluster.
        """
        to_b = self.rng.random(S.size) < 0.5
        for _ in range(self.config.launch_scans):
            va = self._gauss_draw(*self._set_gaussian(np.concatenate(([i], S[~to_b])), idx, t2))
            vb = self._gauss_draw(*self._set_gaussian(np.concatenate(([j], S[to_b])), idx, t2))
            to_b = self.rng.random(S.size) < self._restricted_probs(S, idx, va, vb, logwa, logwb, t2)
        return to_b

    def _final_scan_logprob(self, S, i, j, idx, to_b_launch, va, vb, to_b, logwa, logwb,
                            t2) -> float:
        """Log density of the last restricted scan moving the launch state
        to atoms ``(va, vb)`` and allocation ``to_b``."""
        ga = self._set_gaussian(np.concatenate(([i], S[~to_b_launch])), idx, t2)
        gb = self._set_gaussian(np.concatenate(([j], S[to_b_launch])), idx, t2)
        pb = self._restricted_probs(S, idx, va, vb, logwa, logwb, t2)
        with np.errstate(divide="ignore"):
            alloc = np.sum(np.where(to_b, np.log(pb), np.log1p(-pb)))
        return self._gauss_logpdf(va, *ga) + self._gauss_logpdf(vb, *gb) + float(alloc)

    def update_split_merge(self, state: ChainState) -> None:
        """Metropolis-Hastings split and merge proposals on pairs of clusters.

        Anchored on an ordered pair of subjects: if they share a cluster the
        move splits it into an empty component, otherwise it merges the
        second subject's cluster into the first's. Split proposals come from
        restricted Gibbs scans with Gaussian-approximation atom draws, so the
        proposal density of every state is available in closed form.
        Coordinates outside the likelihood (spiked or above the order) keep
        their prior law and cancel from the ratio.
        """
        d = self.data
        if self.config.split_merge == 0 or state.H < 2 or d.N < 2:
            return
        t2 = state.tau ** 2
        self._a2 = np.sum(state.alpha ** 2, axis=1)
        self._Xty = np.einsum("njd,nj->nd", d.lags, state.alpha)
        for _ in range(self.config.split_merge):
            i, j = self.rng.choice(d.N, size=2, replace=False)
            if state.z[i] == state.z[j]:
                self._try_split(state, i, j, t2)
            else:
                self._try_merge(state, i, j, t2)

    def _empty_choice_logprob(self, w, empty, b) -> float:
        return math.log(w[b]) - math.log(w[empty].sum())

    def _try_split(self, state, i, j, t2):
        a = state.z[i]
        w = state.weights
        counts = np.bincount(state.z, minlength=state.H)
        empty = np.flatnonzero(counts == 0)
        if empty.size == 0 or not w[empty].sum() > 0:
            return
        self.stats.split_proposed += 1
        b = int(self.rng.choice(empty, p=w[empty] / w[empty].sum()))
        idx = self._atom_pattern(state, a)
        members = np.flatnonzero(state.z == a)
        S = members[(members != i) & (members != j)]
        logwa, logwb = math.log(w[a]), math.log(w[b])
        launch = self._launch(S, i, j, idx, logwa, logwb, t2)
        ga = self._set_gaussian(np.concatenate(([i], S[~launch])), idx, t2)
        gb = self._set_gaussian(np.concatenate(([j], S[launch])), idx, t2)
        va, vb = self._gauss_draw(*ga), self._gauss_draw(*gb)
        if np.any(np.abs(va[1:]) >= 1.0) or np.any(np.abs(vb[1:]) >= 1.0):
            return
        pb = self._restricted_probs(S, idx, va, vb, logwa, logwb, t2)
        to_b = self.rng.random(S.size) < pb
        log_fwd = (self._final_scan_logprob(S, i, j, idx, launch, va, vb, to_b, logwa, logwb, t2)
                   + self._empty_choice_logprob(w, empty, b))
        Sa = np.concatenate(([i], S[~to_b]))
        Sb = np.concatenate(([j], S[to_b]))
        cur = state.theta[a, idx]
        log_new = (logwa * Sa.size + logwb * Sb.size
                   + self._subject_ll(Sa, idx, va, t2).sum() + self._subject_ll(Sb, idx, vb, t2).sum()
                   + self._g0_logpdf(va, idx) + self._g0_logpdf(vb, idx)
                   + self._eta_logprior(state, state.eta[a]))
        log_old = (logwa * members.size + self._subject_ll(members, idx, cur, t2).sum()
                   + self._g0_logpdf(cur, idx))
        log_rev = self._gauss_logpdf(cur, *self._set_gaussian(members, idx, t2))
        if math.log(self.rng.random()) < log_new - log_old + log_rev - log_fwd:
            new_b = np.zeros(self.D)
            new_b[1:] = _draws.tbeta_rvs(self.rng, self.hyper.a_Z, self.hyper.b_Z, size=self.L)
            new_b[1:] *= state.eta[a]
            new_b[idx] = vb
            state.theta[b] = new_b
            state.eta[b] = state.eta[a]
            state.theta[a, idx] = va
            state.z[Sb] = b
            self.stats.split_accepted += 1

    def _try_merge(self, state, i, j, t2):
        a, b = state.z[i], state.z[j]
        if not np.array_equal(state.eta[a], state.eta[b]):
            return
        self.stats.merge_proposed += 1
        w = state.weights
        idx = self._atom_pattern(state, a)
        Sa_cur = np.flatnonzero(state.z == a)
        Sb_cur = np.flatnonzero(state.z == b)
        members = np.concatenate((Sa_cur, Sb_cur))
        S = members[(members != i) & (members != j)]
        to_b_cur = state.z[S] == b
        logwa, logwb = math.log(w[a]), math.log(w[b])
        va_cur, vb_cur = state.theta[a, idx], state.theta[b, idx]
        gm = self._set_gaussian(members, idx, t2)
        vm = self._gauss_draw(*gm)
        if np.any(np.abs(vm[1:]) >= 1.0):
            return
        launch = self._launch(S, i, j, idx, logwa, logwb, t2)
        counts = np.bincount(state.z, minlength=state.H)
        counts[a] += counts[b]
        counts[b] = 0
        empty = np.flatnonzero(counts == 0)
        log_rev = (self._final_scan_logprob(S, i, j, idx, launch, va_cur, vb_cur, to_b_cur,
                                            logwa, logwb, t2)
                   + self._empty_choice_logprob(w, empty, b))
        log_fwd = self._gauss_logpdf(vm, *gm)
        log_new = (logwa * members.size + self._subject_ll(members, idx, vm, t2).sum()
                   + self._g0_logpdf(vm, idx))
        log_old = (logwa * Sa_cur.size + logwb * Sb_cur.size
                   + self._subject_ll(Sa_cur, idx, va_cur, t2).sum()
                   + self._subject_ll(Sb_cur, idx, vb_cur, t2).sum()
                   + self._g0_logpdf(va_cur, idx) + self._g0_logpdf(vb_cur, idx)
                   + self._eta_logprior(state, state.eta[b]))
        if math.log(self.rng.random()) < log_new - log_old + log_rev - log_fwd:
            state.theta[a, idx] = vm
            state.z[Sb_cur] = a
            self._redraw_empty(state, np.arange(state.H) == b)
            self.stats.merge_accepted += 1

    def update_sticks(self, state: ChainState) -> None:
        H = state.H
        if H == 1:
            return
        counts = np.bincount(state.z, minlength=H)
        tail = np.concatenate((np.cumsum(counts[::-1])[::-1][1:], [0]))
        V = self.rng.beta(1.0 + counts[:-1], state.M + tail[:-1])
        state.V = np.clip(V, 1e-300, 1.0 - 1e-16)

    def update_atoms(self, state: ChainState) -> None:
        h = self.hyper
        counts, XtX, Xty = self._cluster_stats(state)
        active = self._active(state)
        t2 = state.tau ** 2
        theta = state.theta
        for k in np.flatnonzero(counts):
            idx = np.concatenate(([0], 1 + np.flatnonzero(active[k])))
            A = XtX[k][np.ix_(idx, idx)]
            b = Xty[k][idx]
            if self.config.joint_atom_move and idx.size > 1:
                self._joint_atom_move(theta, k, idx, A, b, t2)
            th = theta[k, idx]
            # intercept: exact Gaussian conditional
            prec0 = A[0, 0] / t2 + 1.0 / h.sigma_g_sq
            lin0 = (b[0] - A[0, 1:] @ th[1:]) / t2
            th[0] = lin0 / prec0 + self.rng.standard_normal() / math.sqrt(prec0)
            for pos in range(1, idx.size):
                others = A[pos] @ th - A[pos, pos] * th[pos]
                th[pos] = self._slice_lag(th[pos], A[pos, pos] / t2, (b[pos] - others) / t2)
            theta[k, idx] = th
        # lags outside the likelihood follow their prior
        empty = counts == 0
        n_empty = int(empty.sum())
        if n_empty:
            self._redraw_empty(state, empty)
        if self.spec.kind == "random_order" and state.p < self.L:
            self._refresh_inactive_lags(state, ~empty)

    def _redraw_empty(self, state: ChainState, empty) -> None:
        n = int(empty.sum())
        if self.spec.kind == "spike_slab":
            if self.spec.spike_scope == "global":
                th, eta = self.prior_atoms(n, state.eta[0])
            else:
                th, _ = self.prior_atoms(n, np.ones(self.L, dtype=bool))
                eta = self.rng.random((n, self.L)) < state.c
                th[:, 1:] *= eta
            state.eta[empty] = eta
        else:
            th, _ = self.prior_atoms(n)
        state.theta[empty] = th

    def _refresh_inactive_lags(self, state: ChainState, rows) -> None:
        n = int(np.count_nonzero(rows))
        k = self.L - state.p
        if n and k:
            state.theta[rows, 1 + state.p:] = _draws.tbeta_rvs(
                self.rng, self.hyper.a_Z, self.hyper.b_Z, size=(n, k))

    def _slice_lag(self, x0, a, lin):
        """Slice update of one lag coefficient with log density
        -a/2 m^2 + lin m + log TBeta(m)."""
        ha, hb, ln = self.hyper.a_Z - 1.0, self.hyper.b_Z - 1.0, self._tb_lognorm

        def logf(m):
            if not -1.0 < m < 1.0:
                return -math.inf
            u = 0.5 * (m + 1.0)
            return -0.5 * a * m * m + lin * m + ha * math.log(u) + hb * math.log1p(-u) - ln

        return _draws.slice_sample(self.rng, float(x0), logf, -1.0, 1.0,
                                   self.config.slice_width, self.config.slice_max_steps,
                                   stats=self.stats.slice)

    def _joint_atom_move(self, theta, k, idx, A, b, t2) -> None:
        """Independence Metropolis-Hastings move on a whole atom.

        Proposes from the Gaussian obtained by replacing each TBeta factor
        with a Normal of equal mean and variance; the acceptance ratio then
        only involves TBeta / Normal density ratios.
        """
        h = self.hyper
        n = idx.size
        pm = np.full(n, self._tb_mean)
        pp = np.full(n, self._tb_prec)
        pm[0], pp[0] = 0.0, 1.0 / h.sigma_g_sq
        Q = A / t2 + np.diag(pp)
        rhs = b / t2 + pp * pm
        try:
            C = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError:
            return
        mean = np.linalg.solve(Q, rhs)
        prop = mean + np.linalg.solve(C.T, self.rng.standard_normal(n))
        self.stats.joint_proposed += 1
        if np.any(np.abs(prop[1:]) >= 1.0):
            return
        cur = theta[k, idx]

        def log_w(v):
            lags = v[1:]
            return float(np.sum(_draws.tbeta_logpdf(lags, h.a_Z, h.b_Z)
                                + 0.5 * self._tb_prec * (lags - self._tb_mean) ** 2))

        if math.log(self.rng.random()) < log_w(prop) - log_w(cur):
            theta[k, idx] = prop
            self.stats.joint_accepted += 1

    def _spike_log_ratio(self, m, A, B, t2, logit_c):
        """log acceptance ratio for switching a lag on at value ``m``.

        The proposal is the Gaussian conditional of the lag given the other
        coefficients, truncated to (-1, 1); with no information (A == 0) the
        TBeta prior is used instead and the ratio reduces to the prior odds.
        """
        h = self.hyper
        if A <= 0.0:
            return logit_c
        mu = B / A
        s = math.sqrt(t2 / A)
        logZ = float(_draws.truncnorm_logmass(mu, s, -1.0, 1.0))
        log_lik = (-0.5 * A * m * m + B * m) / t2
        log_q = -0.5 * LOG_2PI - math.log(s) - 0.5 * ((m - mu) / s) ** 2 - logZ
        log_prior = _draws.tbeta_logpdf_scalar(m, h.a_Z, h.b_Z, self._tb_lognorm)
        return logit_c + log_prior + log_lik - log_q

    def _spike_propose(self, A, B, t2):
        h = self.hyper
        if A <= 0.0:
            return float(_draws.tbeta_rvs(self.rng, h.a_Z, h.b_Z))
        m, _ = _draws.truncnorm(self.rng, B / A, math.sqrt(t2 / A), -1.0, 1.0)
        return float(np.clip(m, -1.0 + 1e-15, 1.0 - 1e-15))

    def update_spike_slab(self, state: ChainState) -> None:
        if self.spec.kind != "spike_slab" or self.L == 0:
            return
        counts, XtX, Xty = self._cluster_stats(state)
        occ = np.flatnonzero(counts)
        t2 = state.tau ** 2
        theta, eta = state.theta, state.eta
        H = state.H
        for l in range(self.L):
            k = 1 + l
            c = min(max(state.c[l], 1e-300), 1.0 - 1e-16)
            logit_c = math.log(c) - math.log1p(-c)

            def stats_for(h):
                A = XtX[h, k, k]
                B = Xty[h, k] - (XtX[h, k] @ theta[h] - A * theta[h, k])
                return A, B

            if self.spec.spike_scope == "atom":
                for h in occ:
                    A, B = stats_for(h)
                    self.stats.spike_proposed += 1
                    if eta[h, l]:
                        logr = -self._spike_log_ratio(theta[h, k], A, B, t2, logit_c)
                        if math.log(self.rng.random()) < logr:
                            eta[h, l] = False
                            theta[h, k] = 0.0
                            self.stats.spike_accepted += 1
                    else:
                        m = self._spike_propose(A, B, t2)
                        logr = self._spike_log_ratio(m, A, B, t2, logit_c)
                        if math.log(self.rng.random()) < logr:
                            eta[h, l] = True
                            theta[h, k] = m
                            self.stats.spike_accepted += 1
                n_on = int(eta[:, l].sum())
                state.c[l] = self.rng.beta(1.0 + n_on, 1.0 + H - n_on)
            else:
                self.stats.spike_proposed += 1
                currently_on = bool(eta[0, l])
                if currently_on:
                    logr = -logit_c
                    for h in occ:
                        A, B = stats_for(h)
                        logr -= self._spike_log_ratio(theta[h, k], A, B, t2, 0.0)
                    if math.log(self.rng.random()) < logr:
                        eta[:, l] = False
                        theta[:, k] = 0.0
                        self.stats.spike_accepted += 1
                else:
                    prop = _draws.tbeta_rvs(self.rng, self.hyper.a_Z, self.hyper.b_Z, size=H)
                    logr = logit_c
                    for h in occ:
                        A, B = stats_for(h)
                        prop[h] = self._spike_propose(A, B, t2)
                        logr += self._spike_log_ratio(prop[h], A, B, t2, 0.0)
                    if math.log(self.rng.random()) < logr:
                        eta[:, l] = True
                        theta[:, k] = prop
                        self.stats.spike_accepted += 1
                on = int(eta[0, l])
                state.c[l] = self.rng.beta(1.0 + on, 2.0 - on)

    def order_logprobs(self, state: ChainState) -> np.ndarray:
        """Unnormalized log full conditional of the order, for r = 0..L."""
        d = self.data
        th = state.theta[state.z].copy()
        a2 = np.sum(state.alpha ** 2, axis=1)
        Xty = np.einsum("njd,nj->nd", d.lags, state.alpha)
        out = np.empty(self.L + 1)
        for r in range(self.L + 1):
            t = th.copy()
            t[:, 1 + r:] = 0.0
            quad = a2 - 2.0 * np.sum(Xty * t, axis=1) + np.einsum("nd,nde,ne->n", t, d.XtX_subj, t)
            out[r] = -np.sum(quad) / (2.0 * state.tau ** 2)
        return out

    def update_order(self, state: ChainState) -> None:
        if self.spec.kind != "random_order":
            return
        lp = self.order_logprobs(state)
        state.p = int(_draws.categorical_from_logits(self.rng, lp[None, :])[0])
        self._refresh_inactive_lags(state, np.ones(state.H, dtype=bool))

    def update_beta(self, state: ChainState) -> None:
        d = self.data
        if d.q == 0:
            return
        s2 = state.sigma ** 2
        b0 = self.hyper.beta0_sq
        resid = np.where(d.mask, d.filled_y(state) - state.alpha, 0.0)
        r = np.einsum("njq,nj->jq", d.X, resid) / s2
        XtX = d.XtX_gap / s2
        if self.model.shared_beta:
            r, XtX = r.sum(axis=0, keepdims=True), XtX.sum(axis=0, keepdims=True)
        Q = XtX + np.eye(d.q)[None] / b0
        C = np.linalg.cholesky(Q)
        mean = np.linalg.solve(Q, r[..., None])[..., 0]
        eps = self.rng.standard_normal(mean.shape)
        draw = mean + np.linalg.solve(np.swapaxes(C, 1, 2), eps[..., None])[..., 0]
        state.beta = np.broadcast_to(draw, (d.J, d.q)).copy()

    def _scale_draw(self, current, n, ss, bound, a0, b0):
        if self.model.scale_prior == "invgamma":
            shape, rate = a0 + 0.5 * n, b0 + 0.5 * ss
            return math.sqrt(rate / self.rng.gamma(shape))

        def logf(s):
            if not 0.0 < s < bound:
                return -math.inf
            return -n * math.log(s) - 0.5 * ss / (s * s)

        return _draws.slice_sample(self.rng, float(current), logf, 0.0, bound,
                                   self.config.slice_width, self.config.slice_max_steps,
                                   stats=self.stats.slice)

    def update_sigma(self, state: ChainState) -> None:
        d, h = self.data, self.hyper
        resid = np.where(d.mask, d.filled_y(state) - d.xb(state.beta) - state.alpha, 0.0)
        ss = float(np.sum(resid ** 2))
        state.sigma = self._scale_draw(state.sigma, d.n_obs, ss, h.sigma_bound, h.a_sigma, h.b_sigma)

    def update_tau(self, state: ChainState) -> None:
        d, h = self.data, self.hyper
        resid = np.where(d.mask, state.alpha - self._alpha_prior_mean(state), 0.0)
        ss = float(np.sum(resid ** 2))
        state.tau = self._scale_draw(state.tau, d.n_obs, ss, h.tau_bound, h.a_tau, h.b_tau)

    def _sd_logprior(self, s, bound, a0, b0) -> float:
        """Log prior density of a standard deviation."""
        if self.model.scale_prior == "uniform":
            return 0.0 if 0.0 < s < bound else -math.inf
        if s <= 0.0:
            return -math.inf
        # inverse gamma on s^2, carried to s
        return -(2.0 * a0 + 1.0) * math.log(s) - b0 / (s * s)

    def update_scales_joint(self, state: ChainState) -> None:
        """Draw (sigma, tau) with the random effects integrated out.

        Given everything but alpha the log gaps have variance
        sigma^2 + tau^2, so the pair is moved in polar form
        (s, phi) = (hypot(sigma, tau), atan2(tau, sigma)). Must be followed
        by an alpha update.
        """
        if not self.config.joint_scales:
            return
        d, h = self.data, self.hyper
        mean = d.xb(state.beta) + self._alpha_prior_mean(state)
        resid = np.where(d.mask, d.filled_y(state) - mean, 0.0)
        ss = float(np.sum(resid ** 2))
        n = d.n_obs

        def logpost(s, phi):
            if s <= 0.0:
                return -math.inf
            sg, ta = s * math.cos(phi), s * math.sin(phi)
            lp = (self._sd_logprior(sg, h.sigma_bound, h.a_sigma, h.b_sigma)
                  + self._sd_logprior(ta, h.tau_bound, h.a_tau, h.b_tau))
            if lp == -math.inf:
                return lp
            return lp + math.log(s) - n * math.log(s) - 0.5 * ss / (s * s)

        s0 = math.hypot(state.sigma, state.tau)
        phi = math.atan2(state.tau, state.sigma)
        s_max = math.hypot(h.sigma_bound, h.tau_bound) if self.model.scale_prior == "uniform" else math.inf
        width = self.config.slice_width
        phi = _draws.slice_sample(self.rng, phi, lambda f: logpost(s0, f), 0.0, 0.5 * math.pi,
                                  width, self.config.slice_max_steps, stats=self.stats.slice)
        s0 = _draws.slice_sample(self.rng, s0, lambda v: logpost(v, phi), 0.0, s_max,
                                 width, self.config.slice_max_steps, stats=self.stats.slice)
        state.sigma, state.tau = s0 * math.cos(phi), s0 * math.sin(phi)

    def update_scales(self, state: ChainState) -> None:
        self.update_sigma(state)
        self.update_tau(state)

    def update_concentration(self, state: ChainState) -> None:
        h = self.hyper
        if h.M_fixed is not None:
            state.M = float(h.M_fixed)
            return
        shape = float(state.H)
        rate = -float(np.sum(np.log1p(-state.V))) if state.H > 1 else 0.0
        u = self.rng.random()
        top = gammainc(shape, rate * h.M0) if rate > 0 else 0.0
        if top > 1e-300:
            M = gammaincinv(shape, u * top) / rate
        else:
            # rate * M0 so small that exp(-rate M) is flat: density ~ M^(H-1)
            M = h.M0 * u ** (1.0 / shape)
        state.M = float(min(max(M, 1e-300), h.M0))

    # ----------------------------------------------------------------- sweep

    BLOCKS = (
        ("impute", "impute_censored", ("y_imputed",)),
        ("scales_joint", "update_scales_joint", ("sigma", "tau")),
        ("alpha", "update_alpha", ("alpha",)),
        ("allocations", "update_allocations", ("z",)),
        ("split_merge", "update_split_merge", ("theta",)),
        ("sticks", "update_sticks", ("V",)),
        ("atoms", "update_atoms", ("theta",)),
        ("spike_slab", "update_spike_slab", ("theta", "c")),
        ("order", "update_order", ("theta",)),
        ("beta", "update_beta", ("beta",)),
        ("sigma", "update_sigma", ("sigma",)),
        ("tau", "update_tau", ("tau",)),
        ("concentration", "update_concentration", ("M",)),
    )

    def sweep(self, state: ChainState, iteration: int | None = None) -> ChainState:
        for name, method, fields in self.BLOCKS:
            try:
                with np.errstate(over="raise", invalid="raise"):
                    getattr(self, method)(state)
            except (FloatingPointError, np.linalg.LinAlgError, ValueError) as exc:
                raise SamplerError(name, str(exc), iteration) from exc
            for f in fields:
                v = getattr(state, f)
                if f == "y_imputed":
                    v = v[self.data.cens_rows]
                if not np.all(np.isfinite(v)):
                    raise SamplerError(name, f"non-finite {f}", iteration)
        return state


def gibbs_sweep(state: ChainState, sampler: GibbsSampler, iteration: int | None = None) -> ChainState:
    """Run one full scan of all blocks on ``state`` (modified in place)."""
    return sampler.sweep(state, iteration)


def simulate_data(sampler: GibbsSampler, state: ChainState):
    """Forward-simulate random effects and log gaps given ``state``.

    Fills ``state.alpha`` and returns the simulated N x J log gaps.
    """
    d = sampler.data
    alpha, Y = forward_simulate(sampler.rng, d.X, d.mask, state.beta, state.theta[state.z],
                                sampler.spec, state.p, state.sigma, state.tau)
    state.alpha = alpha
    return Y


def _record(sampler: GibbsSampler, state: ChainState) -> dict:
    w = state.weights
    th = state.effective_theta()
    h = sampler.rng.choice(state.H, p=w / w.sum())
    incl = sampler._active(state)
    return {
        "sigma": state.sigma, "tau": state.tau, "M": state.M, "p": state.p, "K": state.K,
        "w_last": float(w[-1]),
        "beta": state.beta.copy(),
        "atom": th[h].copy(),
        "incl": (w @ incl) if sampler.L else np.zeros(0),
        "z": state.z.copy(),
    }


def run_chain(data, model: ModelConfig, config: SamplerConfig | None = None,
              seed=None, state: ChainState | None = None, progress: bool = False):
    """Run one chain and return its :class:`~gapdpm.store.DrawStore`.

    ``data`` may be a :class:`GapTimeDataset` or an already prepared
    :class:`PreparedData`. ``seed`` overrides ``config.seed`` and may be
    a ``numpy.random.SeedSequence``.
    """
    from .store import DrawStore

    config = config or SamplerConfig()
    if isinstance(data, GapTimeDataset):
        dataset = data
        prepared = PreparedData.from_dataset(data, model.dependence)
    else:
        dataset, prepared = None, data
    rng = np.random.default_rng(config.seed if seed is None else seed)
    sampler = GibbsSampler(prepared, model, config, rng)
    state = state if state is not None else sampler.initial_state()
    records = []
    t0 = time.perf_counter()
    for it in range(1, config.iterations + 1):
        sampler.sweep(state, it)
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            records.append(_record(sampler, state))
        if progress and it % 1000 == 0:
            log.info("sweep %d/%d  K=%d p=%d sigma=%.3f tau=%.3f", it, config.iterations,
                     state.K, state.p, state.sigma, state.tau)
    elapsed = time.perf_counter() - t0
    store = DrawStore.from_records(records, model=model, config=config, dataset=dataset,
                                   J=prepared.J, q=prepared.q, N=prepared.N)
    store.info.update({
        "slice_calls": sampler.stats.slice.calls,
        "slice_failures": sampler.stats.slice.failures,
        "joint_atom_acceptance": (sampler.stats.joint_accepted / sampler.stats.joint_proposed
                                  if sampler.stats.joint_proposed else None),
        "spike_acceptance": (sampler.stats.spike_accepted / sampler.stats.spike_proposed
                             if sampler.stats.spike_proposed else None),
        "extreme_imputations": sampler.stats.extreme_imputations,
        "split_acceptance": (sampler.stats.split_accepted / sampler.stats.split_proposed
                             if sampler.stats.split_proposed else None),
        "merge_acceptance": (sampler.stats.merge_accepted / sampler.stats.merge_proposed
                             if sampler.stats.merge_proposed else None),
    })
    store.wall_time = elapsed
    return store, state


def chain_seeds(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def _run_one(args):
    data, model, config, seed = args
    store, _ = run_chain(data, model, config, seed=seed)
    return store


def run_chains(dataset, model: ModelConfig, config: SamplerConfig, processes: int | None = None):
    """Run ``config.chains`` independent chains with spawned seed streams."""
    seeds = chain_seeds(config.seed, config.chains)
    jobs = [(dataset, model, config, s) for s in seeds]
    if config.chains == 1 or processes == 1:
        return [_run_one(j) for j in jobs]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=processes) as ex:
        return list(ex.map(_run_one, jobs))
