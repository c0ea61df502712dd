import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate, stats

from gapdpm.data import SubjectRecord
from gapdpm.model import (Atom, DependenceSpec, Hyperparameters, ModelError, alpha_conditional_mean,
                          alpha_loglik, alpha_marginal_variance, forward_simulate, lag_design,
                          loglik_subject, obs_mean, stick_weights, summary_f, tbeta_logpdf)


@pytest.mark.parametrize("x, beta, a, expected", [
    ((0.0, 0.0), (1.0, 2.0), 0.0, 0.0),
    ((1.0, 0.0), (2.0, 5.0), 0.5, 2.5),
    ((1.0, 1.0), (0.3, -0.2), 1.1, 1.2),
])
def test_obs_mean(x, beta, a, expected):
    assert obs_mean(x, beta, a) == pytest.approx(expected)


def test_obs_mean_shape_mismatch():
    with pytest.raises(ModelError):
        obs_mean((1.0,), (1.0, 2.0), 0.0)


@pytest.mark.parametrize("f", ["last_value", "arithmetic_mean", "geometric_mean"])
def test_summary_single_element(f):
    assert summary_f([3.0], f) == pytest.approx(3.0)


def test_summary_means():
    assert summary_f([1.0, 3.0], "arithmetic_mean") == pytest.approx(2.0)
    assert summary_f([2.0, 8.0], "geometric_mean") == pytest.approx(4.0)
    assert summary_f([-2.0, 8.0], "geometric_mean") == pytest.approx(-4.0)
    with pytest.raises(ModelError):
        summary_f([], "last_value")


def test_alpha_conditional_mean_examples():
    ar3 = DependenceSpec.fixed(3)
    assert alpha_conditional_mean(Atom(0.7, (0.2, 0.1, 0.0)), [], ar3) == pytest.approx(0.7)
    assert alpha_conditional_mean(Atom(0.0, (0.9, 0.7)), [1.0, 1.0],
                                  DependenceSpec.fixed(2)) == pytest.approx(1.6)
    # only two past values: the lag-3 term is dropped
    assert alpha_conditional_mean(Atom(0.0, (0.99, 0.7, 0.4)), [1.0, 2.0], ar3) == pytest.approx(
        0.99 * 2 + 0.7 * 1)
    assert alpha_conditional_mean(Atom(1.0, (0.5,)), [2.0, 4.0],
                                  DependenceSpec.summary("arithmetic_mean")) == pytest.approx(2.5)


def test_atom_rejects_nonstationary_lags():
    with pytest.raises(ModelError):
        Atom(0.0, (1.0,))
    with pytest.raises(ModelError):
        Atom(0.0, (0.2, -1.5))


@given(st.lists(st.floats(0.0, 1.0), min_size=0, max_size=40))
def test_stick_weights_sum_to_one(V):
    w = stick_weights(V)
    assert w.size == len(V) + 1
    assert np.all(w >= 0)
    assert abs(w.sum() - 1.0) < 1e-12


def test_tbeta_logpdf_values():
    assert tbeta_logpdf(0.0, 1.0, 1.0) == pytest.approx(math.log(0.5))
    assert tbeta_logpdf(0.0, 3.0, 3.0) == pytest.approx(math.log(15 / 16))
    assert tbeta_logpdf(0.4, 3.0, 3.0) == pytest.approx(tbeta_logpdf(-0.4, 3.0, 3.0))
    assert tbeta_logpdf(1.0, 3.0, 3.0) == -np.inf


@pytest.mark.parametrize("a, b", [(3.0, 3.0), (2.0, 5.0), (0.7, 1.3)])
def test_tbeta_integrates_to_one(a, b):
    total, _ = integrate.quad(lambda y: math.exp(tbeta_logpdf(y, a, b)), -1, 1, epsabs=1e-12)
    assert total == pytest.approx(1.0, abs=1e-8)


def test_tbeta_matches_scipy_beta():
    y = np.linspace(-0.95, 0.95, 11)
    np.testing.assert_allclose(tbeta_logpdf(y, 2.5, 4.0),
                               stats.beta(2.5, 4.0).logpdf((y + 1) / 2) - math.log(2))


def record(gaps, censored=False, q=0):
    return SubjectRecord("s", np.exp(np.asarray(gaps, float)), censored, np.zeros((len(gaps), q)))


def test_loglik_subject_examples():
    rec = record([1.0])
    assert loglik_subject(rec, np.zeros((1, 0)), [0.8], 0.5) == pytest.approx(-0.3058, abs=1e-4)
    cens = record([0.0], censored=True)
    assert loglik_subject(cens, np.zeros((1, 0)), [0.0], 1.0) == pytest.approx(math.log(0.5))


def test_loglik_survival_term_matches_quadrature():
    # integrate the latent censored log gap over its truncated support
    rec = record([0.3, -0.2, 0.9], censored=True, q=1)
    rec = SubjectRecord("s", rec.gap_times, True, np.array([[1.0], [0.5], [-1.0]]))
    beta = np.array([[0.4], [0.1], [0.7]])
    alpha = np.array([0.2, -0.1, 0.3])
    sigma = 0.8
    mu = rec.covariates[:, 0] * beta[:, 0] + alpha
    dens, _ = integrate.quad(lambda y: stats.norm.pdf(y, mu[2], sigma), 0.9, np.inf,
                             epsabs=1e-13, epsrel=1e-12)
    expected = stats.norm.logpdf([0.3, -0.2], mu[:2], sigma).sum() + math.log(dens)
    assert loglik_subject(rec, beta, alpha, sigma) == pytest.approx(expected, abs=1e-6)


def test_saturated_lags_do_not_change_alpha_loglik(rng):
    Y = rng.standard_normal((1, 5))
    lags = lag_design(Y, np.ones_like(Y, bool), DependenceSpec.random_order(3))[0]
    alpha = rng.standard_normal(5)
    theta = np.array([0.1, 0.5, -0.3, 0.2])
    base = alpha_loglik(alpha, lags, theta, 1, 0.7)
    for _ in range(5):
        pert = theta.copy()
        pert[2:] = rng.uniform(-1, 1, 2)
        assert alpha_loglik(alpha, lags, pert, 1, 0.7) == pytest.approx(base, abs=1e-12)


def test_lag_design_layout():
    Y = np.array([[1.0, 2.0, 3.0, np.nan]])
    mask = np.array([[True, True, True, False]])
    out = lag_design(Y, mask, DependenceSpec.fixed(2))
    np.testing.assert_allclose(out[0], [[1, 0, 0], [1, 1, 0], [1, 2, 1], [0, 0, 0]])
    out = lag_design(Y, mask, DependenceSpec.summary("arithmetic_mean"))
    np.testing.assert_allclose(out[0, :3, 1], [0.0, 1.0, 1.5])
    out = lag_design(np.array([[2.0, 8.0, 1.0]]), np.ones((1, 3), bool),
                     DependenceSpec.summary("geometric_mean"))
    np.testing.assert_allclose(out[0, :, 1], [0.0, 2.0, 4.0])


@given(st.floats(-0.95, 0.95), st.floats(0.05, 3), st.floats(0.05, 3), st.integers(1, 8))
def test_variance_recursion(m1, sigma, tau, j):
    v = alpha_marginal_variance(m1, sigma, tau, j)
    if j == 1:
        assert v == pytest.approx(tau ** 2)
    else:
        prev = alpha_marginal_variance(m1, sigma, tau, j - 1)
        assert v == pytest.approx(tau ** 2 + m1 ** 2 * (prev + sigma ** 2))


def test_variance_independent_case():
    assert alpha_marginal_variance(0.0, 2.0, 1.5, 4) == pytest.approx(2.25)
    with pytest.raises(ModelError):
        alpha_marginal_variance(1.0, 1.0, 1.0, 2)
    with pytest.raises(ModelError):
        alpha_marginal_variance(0.5, 1.0, 1.0, 0)


def test_variance_against_simulation(rng):
    m1, sigma, tau = 0.5, 1.0, 1.0
    n = 200_000
    mask = np.ones((n, 4), bool)
    theta = np.tile([0.0, m1], (n, 1))
    alpha, _ = forward_simulate(rng, np.zeros((n, 4, 0)), mask, np.zeros((4, 0)), theta,
                                DependenceSpec.summary(), 1, sigma, tau)
    for j in range(1, 5):
        assert alpha[:, j - 1].var() == pytest.approx(
            alpha_marginal_variance(m1, sigma, tau, j), rel=0.02)


def test_hyperparameter_validation():
    with pytest.raises(ModelError):
        Hyperparameters(sigma_g_sq=0)
    with pytest.raises(ModelError):
        Hyperparameters(H=0)
    with pytest.raises(ModelError):
        DependenceSpec("nonsense")
