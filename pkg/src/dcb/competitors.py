"""Reference estimators: stabilized IPW, augmented IPW, naive Lasso and
sequential (plug-in) estimation."""

import warnings
from dataclasses import dataclass, field

import numpy as np

from .balancer import construct_sipw_weights
from .errors import EmptyStratum, SeparationWarning, ZeroDenominator
from .estimator import EstimateReport, report_from_parts, weight_diagnostics
from .panel import PanelDataset, build_history, match_mask, treatment_history
from .regression import (
    PROB_CLIP,
    LassoConfig,
    cross_validate_logistic_lambda,
    lasso_cv_fit,
    lasso_cv_multi,
    logistic_fit,
)

PROPENSITY_MODES = ("known", "logistic", "penalized_logistic")

# the per-coordinate transition models make sequential estimation the most
# expensive method; a coarser grid keeps it within the desk-scale budget
SEQUENTIAL_LASSO = LassoConfig(n_lambda=20, lambda_ratio=1e-2, tol=1e-5)


@dataclass
class PropensityModel:
    """Per-period treatment probabilities ``P(D_t = 1 | past)``.

    ``prob1`` has shape (n, T). For estimated models ``coefs[t-1]`` holds
    the logistic coefficients on the columns of ``H_t``.
    """

    mode: str
    prob1: np.ndarray
    coefs: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in PROPENSITY_MODES:
            raise ValueError(f"unknown propensity mode {self.mode!r}")
        self.prob1 = np.clip(np.asarray(self.prob1, dtype=float), PROB_CLIP, 1 - PROB_CLIP)

    @classmethod
    def known(cls, prob1):
        return cls("known", prob1)

    @classmethod
    def fit(cls, data, T=None, penalized=False, seed=0):
        """Pooled logistic regression of ``D_t`` on ``H_t`` for each period.

        The penalised variant leaves the intercept and past treatments
        unpenalised and picks the penalty by cross-validated deviance.
        """
        T = data.T if T is None else T
        prob = np.empty((data.n, T))
        coefs, lams = [], []
        for t in range(1, T + 1):
            H = build_history(data, t)
            mask = np.ones(H.width, dtype=bool)
            mask[H.columns("intercept")] = False
            mask[H.columns("treatment")] = False
            dt = data.d[:, t - 1].astype(float)
            lam = 0.0
            if penalized:
                lam = cross_validate_logistic_lambda(H.values, dt, mask, seed=seed + t)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", SeparationWarning)
                fit = logistic_fit(H.values, dt, lam, mask)
            prob[:, t - 1] = fit.predict_proba(H.values)
            coefs.append(fit.coef)
            lams.append(lam)
        mode = "penalized_logistic" if penalized else "logistic"
        return cls(mode, prob, coefs, lams)

    def path_probability(self, d):
        """``P(D_t = d_t | past)`` per unit, shape (n, len(d))."""
        d = np.asarray(treatment_history(d))
        p1 = self.prob1[:, : d.size]
        return np.where(d[None, :] == 1, p1, 1.0 - p1)


def sipw_sequence(data, d, propensity):
    """Stabilized inverse-probability weights for every period, shape (T, n)."""
    d = treatment_history(d)
    probs = propensity.path_probability(d)
    prev = np.full(data.n, 1.0 / data.n)
    out = np.empty((len(d), data.n))
    for t in range(1, len(d) + 1):
        on = match_mask(data, d[:t])
        if not on.any():
            raise ZeroDenominator(f"no unit follows treatment prefix {d[:t]}")
        prev = construct_sipw_weights(prev, probs[:, t - 1], on)
        out[t - 1] = prev
    return out


def ipw_estimate(data, d, propensity, alpha=0.05):
    """Stabilized IPW: weighted mean of final outcomes on the target path."""
    d = treatment_history(d)
    gamma = sipw_sequence(data, d, propensity)
    y = data.y[:, len(d) - 1]
    g = gamma[-1]
    mu = float(g @ y)
    v = data.n * float(g**2 @ (y - mu) ** 2)
    diag = weight_diagnostics(gamma)
    return EstimateReport(
        mu_hat=mu, v_hat=v, v_hat_ho=v, n=data.n, T=len(d), alpha=alpha, target=d, diagnostics=diag
    )


def aipw_estimate(data, d, propensity, coef_path, alpha=0.05, quantile="chi_squared"):
    """The balancing estimator's assembly with stabilized IPW weights."""
    d = treatment_history(d)
    if tuple(coef_path.target) != d:
        raise ValueError("coefficient path was fitted for a different history")
    gamma = sipw_sequence(data, d, propensity)
    return report_from_parts(data, d, gamma, coef_path.fitted, alpha, quantile, coef_path=coef_path)


def _naive_design(data, T):
    n = data.n
    X = data.x[:, :T, :].reshape(n, -1)
    D = data.d[:, :T].astype(float)
    Z = np.hstack([X, D, np.ones((n, 1))])
    mask = np.ones(Z.shape[1], dtype=bool)
    mask[X.shape[1] :] = False
    return Z, mask, X.shape[1]


def naive_lasso_estimate(data, d, d_alt=None, lasso_cfg=None):
    """Lasso of ``Y_T`` on all covariates and treatments, treatments unpenalised.

    With ``d_alt`` the estimate is the treatment-coefficient contrast
    ``sum_t b_t (d_t - d_alt_t)``; otherwise the fitted value at the mean
    covariates and treatments ``d``.
    """
    d = treatment_history(d)
    T = len(d)
    Z, mask, k = _naive_design(data, T)
    fit = lasso_cv_fit(Z, data.y[:, T - 1], mask, lasso_cfg or LassoConfig())
    bd = fit.coef[k : k + T]
    if d_alt is not None:
        d_alt = treatment_history(d_alt)
        return float(bd @ (np.asarray(d, float) - np.asarray(d_alt, float)))
    return float(Z[:, :k].mean(axis=0) @ fit.coef[:k] + bd @ np.asarray(d, float) + fit.coef[-1])


def _frame(x, d, y):
    """A panel holding predicted covariates/outcomes under a fixed path."""
    n = x.shape[0]
    return PanelDataset(x, np.broadcast_to(np.asarray(d, np.int8), (n, len(d))), y)


def sequential_estimate(data, d, lasso_cfg=None):
    """Plug-in estimate from per-period Lasso transition models.

    For each ``t`` a Lasso of ``Y_t`` on ``H_t`` and, for ``t < T``, one
    Lasso per coordinate of ``X_{t+1}`` on ``(H_t, Y_t)`` are fitted on
    units following ``d_{1:t}``. Starting from every unit's baseline
    covariates the fitted models are rolled forward under ``d``; the
    estimate is the mean predicted final outcome.
    """
    d = treatment_history(d)
    T = len(d)
    cfg = lasso_cfg or SEQUENTIAL_LASSO
    n, p = data.n, data.p_cov
    y_models, x_models = [], []
    for t in range(1, T + 1):
        on = match_mask(data, d[:t])
        if not on.any():
            raise EmptyStratum(d[:t])
        H = build_history(data, t)
        mask = np.ones(H.width, dtype=bool)
        mask[H.columns("intercept")] = False
        y_models.append(lasso_cv_fit(H.values[on], data.y[on, t - 1], mask, cfg).coef)
        if t < T:
            Z = np.hstack([H.values, data.y[:, [t - 1]]])
            zmask = np.append(mask, True)
            x_models.append(lasso_cv_multi(Z[on], data.x[on, t, :], zmask, cfg))
    # roll forward
    x_hat = np.zeros((n, T, p))
    y_hat = np.zeros((n, T))
    x_hat[:, 0] = data.x[:, 0]
    for t in range(1, T + 1):
        frame = _frame(x_hat[:, :t], d[:t], y_hat[:, :t])
        H = build_history(frame, t)
        y_hat[:, t - 1] = H.values @ y_models[t - 1]
        if t < T:
            Z = np.hstack([H.values, y_hat[:, [t - 1]]])
            x_hat[:, t] = Z @ x_models[t - 1]
    return float(y_hat[:, T - 1].mean())
