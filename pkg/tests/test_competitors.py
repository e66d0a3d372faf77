import numpy as np
import pytest

from dcb.balancer import BalanceConfig
from dcb.competitors import (
    PropensityModel,
    aipw_estimate,
    ipw_estimate,
    naive_lasso_estimate,
    sequential_estimate,
    sipw_sequence,
)
from dcb.errors import EmptyStratum, ZeroDenominator
from dcb.estimator import DCBConfig, dcb_estimate, report_from_parts
from dcb.panel import PanelDataset, build_history, match_mask
from dcb.regression import LassoConfig, fit_coefficient_path, lasso_cv_fit

EXACT = LassoConfig(lam=1e-12, tol=1e-14, max_iter=100_000)


def test_propensity_model_modes(small_sim):
    data, oracle = small_sim
    pm = PropensityModel.known(np.zeros((data.n, data.T)))
    assert pm.prob1.min() > 0
    with pytest.raises(ValueError):
        PropensityModel("oracle", oracle.propensity)
    probs = pm.path_probability((1, 0))
    assert probs.shape == (data.n, 2)
    assert np.allclose(probs[:, 1], 1 - pm.prob1[:, 1])
    fit = PropensityModel.fit(data, penalized=True)
    assert fit.mode == "penalized_logistic" and len(fit.coefs) == data.T
    assert np.all((fit.prob1 > 0) & (fit.prob1 < 1))


def test_ipw_constant_propensity_is_stratum_mean(small_sim):
    data, _ = small_sim
    pm = PropensityModel.known(np.full((data.n, data.T), 0.5))
    for d in [(1, 1), (0, 1)]:
        rep = ipw_estimate(data, d, pm)
        on = match_mask(data, d)
        assert rep.mu_hat == pytest.approx(data.y[on, 1].mean(), rel=1e-12)


def test_ipw_concentration_reported():
    rng = np.random.default_rng(3)
    n = 50
    d = np.zeros((n, 1), dtype=int)
    d[:10] = 1
    prob = np.full((n, 1), 0.5)
    prob[0] = 1e-6
    data = PanelDataset(rng.standard_normal((n, 1, 2)), d, rng.standard_normal((n, 1)))
    rep = ipw_estimate(data, (1,), PropensityModel.known(prob))
    assert rep.diagnostics["max_weight"][0] > 0.999
    assert rep.diagnostics["effective_sample_size"][0] < 1.01


def test_sipw_sequence_errors(small_sim):
    data, oracle = small_sim
    flat = PanelDataset(data.x, np.zeros_like(data.d), data.y)
    with pytest.raises(ZeroDenominator):
        sipw_sequence(flat, (1, 1), PropensityModel.known(oracle.propensity))


def test_shared_assembly(small_sim):
    data, oracle = small_sim
    path = fit_coefficient_path(data, (1, 1))
    rep = dcb_estimate(data, (1, 1), DCBConfig(balance=BalanceConfig(delta=[0.5, 0.5])), path)
    again = report_from_parts(data, (1, 1), rep.weights.gamma, path.fitted)
    assert again.mu_hat == rep.mu_hat and again.v_hat == rep.v_hat
    pm = PropensityModel.known(oracle.propensity)
    a = aipw_estimate(data, (1, 1), pm, path)
    b = report_from_parts(data, (1, 1), sipw_sequence(data, (1, 1), pm), path.fitted)
    assert a.mu_hat == b.mu_hat
    with pytest.raises(ValueError):
        aipw_estimate(data, (0, 0), pm, path)


def test_naive_lasso_zero_covariates():
    rng = np.random.default_rng(4)
    n = 300
    d = rng.integers(0, 2, size=(n, 1))
    y = 1.5 * d + rng.standard_normal((n, 1))
    data = PanelDataset(np.zeros((n, 1, 3)), d, y)
    est = naive_lasso_estimate(data, (1,), (0,))
    on = d[:, 0] == 1
    assert est == pytest.approx(y[on, 0].mean() - y[~on, 0].mean(), abs=1e-8)


def test_naive_lasso_without_carryover():
    rng = np.random.default_rng(5)
    n, p, tau = 1000, 10, 0.8
    x = rng.standard_normal((n, 2, p))
    d = rng.integers(0, 2, size=(n, 2))
    b = np.zeros(p)
    b[:3] = 1.0
    y = x @ b + tau * d + rng.standard_normal((n, 2))
    data = PanelDataset(x, d, y)
    se = 2.0 / np.sqrt(n)
    assert abs(naive_lasso_estimate(data, (0, 1), (0, 0)) - tau) < 2 * se
    assert abs(naive_lasso_estimate(data, (1, 1), (0, 0)) - tau) < 2 * se * np.sqrt(2)


def test_sequential_noiseless_exact():
    rng = np.random.default_rng(6)
    n, p, tau = 400, 3, 1.0
    x1 = rng.standard_normal((n, p))
    x = np.stack([x1, 0.5 * x1], axis=1)
    d = rng.integers(0, 2, size=(n, 2))
    b = np.array([1.0, -0.5, 0.25])
    y1 = x1 @ b + tau * d[:, 0]
    y2 = 0.5 * x1 @ b + y1 + tau * d.sum(axis=1)
    data = PanelDataset(x, d, np.column_stack([y1, y2]))
    est = sequential_estimate(data, (1, 1), EXACT)
    truth = np.mean(1.5 * x1 @ b + 3 * tau)
    assert est == pytest.approx(truth, abs=1e-6)


def test_sequential_single_period(small_sim):
    data, _ = small_sim
    one = PanelDataset(data.x[:, :1], data.d[:, :1], data.y[:, :1])
    cfg = LassoConfig(n_lambda=10)
    H = build_history(one, 1)
    on = match_mask(one, (1,))
    mask = np.ones(H.width, dtype=bool)
    mask[H.columns("intercept")] = False
    fit = lasso_cv_fit(H.values[on], one.y[on, 0], mask, cfg)
    assert sequential_estimate(one, (1,), cfg) == pytest.approx(np.mean(H.values @ fit.coef), abs=1e-12)


def test_sequential_empty_stratum(small_sim):
    data, _ = small_sim
    flat = PanelDataset(data.x, np.zeros_like(data.d), data.y)
    with pytest.raises(EmptyStratum):
        sequential_estimate(flat, (1, 1))
