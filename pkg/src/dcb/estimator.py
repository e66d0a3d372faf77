"""Point estimate, variance and confidence intervals for treatment histories.

With normalised weights ``g_t`` (each summing to one, ``g_0 = 1/n``) and
counterfactual predictions ``f_t = H_t beta_t`` the estimate is::

    mu = sum_i g_T,i Y_T,i - sum_{t=2..T} sum_i (g_t,i - g_{t-1},i) f_t,i
         - sum_i (g_1,i - 1/n) f_1,i
"""

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammainc, ndtri

from .balancer import BalanceConfig, TuningGrid, solve_weight_sequence, tune_constraints
from .panel import match_mask, treatment_history
from .regression import LassoConfig, fit_coefficient_path

SCHEMA_VERSION = 1


# ---------------------------------------------------------------------------
# quantiles


def chi_quantile(df, alpha):
    """Upper ``alpha`` quantile of the chi-squared distribution with ``df`` degrees.

    Inverts the regularised lower incomplete gamma function by bisection.
    """
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    k = df / 2.0
    target = 1.0 - alpha
    lo, hi = 0.0, max(1.0, float(df))
    while gammainc(k, hi / 2.0) < target:
        lo, hi = hi, 2.0 * hi
    while hi - lo > 1e-12 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if gammainc(k, mid / 2.0) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def critical_value(df, alpha, mode="chi_squared"):
    """``sqrt(chi2_df(alpha))`` or the two-sided Gaussian quantile."""
    mode = _mode(mode)
    if mode == "chi_squared":
        return math.sqrt(chi_quantile(df, alpha))
    return float(ndtri(1.0 - alpha / 2.0))


def _mode(mode):
    aliases = {"chi": "chi_squared", "chi_squared": "chi_squared", "gauss": "gaussian", "gaussian": "gaussian"}
    try:
        return aliases[mode]
    except KeyError:
        raise ValueError(f"unknown quantile mode {mode!r}") from None


def confidence_interval(mu_hat, v_hat, n, T, alpha=0.05, mode="chi_squared"):
    """Interval ``mu_hat -/+ q sqrt(v_hat / n)``; ``T`` sets the chi-squared degrees."""
    if v_hat < 0:
        raise ValueError("variance must be nonnegative")
    half = critical_value(T, alpha, mode) * math.sqrt(v_hat / n)
    return mu_hat - half, mu_hat + half


# ---------------------------------------------------------------------------
# assembly


def assemble_estimate(y_last, gamma, fitted):
    """Combine weights and counterfactual predictions into the point estimate.

    Parameters
    ----------
    y_last : (n,) outcomes at the final period
    gamma : (T, n) weights, rows summing to one
    fitted : (n, T) predictions ``H_t beta_t``
    """
    gamma = np.asarray(gamma, dtype=float)
    fitted = np.asarray(fitted, dtype=float)
    T, n = gamma.shape
    mu = gamma[T - 1] @ y_last
    for t in range(T, 1, -1):
        mu -= (gamma[t - 1] - gamma[t - 2]) @ fitted[:, t - 1]
    mu -= (gamma[0] - 1.0 / n) @ fitted[:, 0]
    return float(mu)


@dataclass
class ResidualSet:
    """``eps = Y_T - f_T`` and ``nu[t-1] = f_{t+1} - f_t`` for ``t < T``.

    Entries for units outside the relevant stratum are set to zero; they
    carry zero weight.
    """

    eps: np.ndarray
    nu: list

    @classmethod
    def from_fit(cls, data, d, fitted):
        d = treatment_history(d)
        T = len(d)
        on_T = match_mask(data, d)
        eps = np.where(on_T, data.y[:, T - 1] - fitted[:, T - 1], 0.0)
        nu = []
        for t in range(1, T):
            on = match_mask(data, d[:t])
            nu.append(np.where(on, fitted[:, t] - fitted[:, t - 1], 0.0))
        return cls(eps, nu)

    def by_period(self):
        """Residual vectors aligned with weight periods 1..T."""
        return [*self.nu, self.eps]


def variance_estimate(gamma, residuals, kind="he"):
    """Variance estimate ``n sum g_T^2 eps^2 + sum_{t<T} n sum g_t^2 nu_t^2``.

    ``kind='ho'`` replaces each period's squared residuals by their
    weight-averaged value.
    """
    gamma = np.asarray(gamma, dtype=float)
    T, n = gamma.shape
    parts = residuals.by_period()
    if len(parts) != T:
        raise ValueError("one residual vector per period is required")
    v = 0.0
    for t in range(T):
        g = gamma[t]
        r2 = np.asarray(parts[t], dtype=float) ** 2
        if kind == "he":
            v += n * float(g**2 @ r2)
        elif kind == "ho":
            v += n * float(g @ g) * float(g @ r2) / float(g.sum())
        else:
            raise ValueError("kind must be 'he' or 'ho'")
    return v


# ---------------------------------------------------------------------------
# reports


@dataclass
class EstimateReport:
    """Point estimate with variance and both interval types.

    ``ci`` uses ``quantile_mode``; ``ci_chi`` and ``ci_gauss`` are always
    filled. ``df`` is the number of chi-squared degrees used (``T`` for a
    level, ``2T`` for a contrast).
    """

    mu_hat: float
    v_hat: float
    v_hat_ho: float
    n: int
    T: int
    alpha: float = 0.05
    quantile_mode: str = "chi_squared"
    df: int = None
    target: tuple = None
    target_alt: tuple = None
    residual_summary: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    weights: object = None
    coef_path: object = None
    components: tuple = ()

    def __post_init__(self):
        self.quantile_mode = _mode(self.quantile_mode)
        if self.df is None:
            self.df = self.T

    def interval(self, mode=None, variance="he"):
        v = self.v_hat if variance == "he" else self.v_hat_ho
        return confidence_interval(
            self.mu_hat, v, self.n, self.df, self.alpha, mode or self.quantile_mode
        )

    @property
    def ci(self):
        return self.interval()

    @property
    def ci_lo(self):
        return self.ci[0]

    @property
    def ci_hi(self):
        return self.ci[1]

    @property
    def ci_chi(self):
        return self.interval("chi_squared")

    @property
    def ci_gauss(self):
        return self.interval("gaussian")

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "mu_hat": self.mu_hat,
            "v_hat": self.v_hat,
            "v_hat_ho": self.v_hat_ho,
            "ci": list(self.ci),
            "ci_chi": list(self.ci_chi),
            "ci_gauss": list(self.ci_gauss),
            "alpha": self.alpha,
            "mode": self.quantile_mode,
            "df": self.df,
            "n": self.n,
            "T": self.T,
            "target": list(self.target) if self.target else None,
            "target_alt": list(self.target_alt) if self.target_alt else None,
            "residual_summary": self.residual_summary,
            "diagnostics": self.diagnostics,
        }

    def to_json(self, path=None, **kw):
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True, default=_json_default, **kw)
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text + "\n")
        return text


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _residual_summary(gamma, residuals):
    out = {}
    for t, r in enumerate(residuals.by_period(), start=1):
        g = gamma[t - 1]
        key = "eps" if t == len(gamma) else f"nu_{t}"
        out[key] = {"weighted_mean_sq": float(g @ r**2), "max_abs": float(np.max(np.abs(r[g > 0]), initial=0.0))}
    return out


def weight_diagnostics(gamma):
    """Max weight and effective sample size ``1 / sum g^2`` per period."""
    return {
        "max_weight": [float(g.max()) for g in gamma],
        "effective_sample_size": [float(1.0 / (g @ g)) for g in gamma],
        "support": [int(np.count_nonzero(g)) for g in gamma],
    }


def report_from_parts(data, d, gamma, fitted, alpha=0.05, quantile="chi_squared", weights=None, coef_path=None):
    """Shared assembly for any weight sequence and coefficient path."""
    d = treatment_history(d)
    T = len(d)
    gamma = np.asarray(gamma, dtype=float)
    mu = assemble_estimate(data.y[:, T - 1], gamma, fitted)
    res = ResidualSet.from_fit(data, d, fitted)
    diag = weight_diagnostics(gamma)
    return EstimateReport(
        mu_hat=mu,
        v_hat=variance_estimate(gamma, res, "he"),
        v_hat_ho=variance_estimate(gamma, res, "ho"),
        n=data.n,
        T=T,
        alpha=alpha,
        quantile_mode=quantile,
        target=d,
        residual_summary=_residual_summary(gamma, res),
        diagnostics=diag,
        weights=weights,
        coef_path=coef_path,
    )


# ---------------------------------------------------------------------------
# estimators


@dataclass
class DCBConfig:
    """Settings of :func:`dcb_estimate`.

    ``balance=None`` tunes the slacks with ``grid``; pass a
    :class:`BalanceConfig` to use fixed slacks instead.
    """

    mode: str = "linear"
    lasso: LassoConfig = field(default_factory=LassoConfig)
    grid: TuningGrid = field(default_factory=TuningGrid)
    balance: BalanceConfig = None
    base_delta: list = None
    alpha: float = 0.05
    quantile: str = "chi_squared"


def dcb_estimate(data, d, cfg=None, coef_path=None):
    """Dynamic covariate balancing estimate of the mean potential outcome under ``d``."""
    cfg = cfg or DCBConfig()
    d = treatment_history(d)
    path = coef_path or fit_coefficient_path(data, d, cfg.mode, cfg.lasso)
    if cfg.balance is None:
        bcfg, weights, traces = tune_constraints(data, d, path, base=cfg.base_delta, grid=cfg.grid)
        tuning = [t.__dict__ for t in traces]
    else:
        weights = solve_weight_sequence(data, d, cfg.balance)
        tuning = None
    rep = report_from_parts(
        data, d, weights.gamma, path.fitted, cfg.alpha, cfg.quantile, weights, path
    )
    rep.diagnostics["achieved_imbalance"] = [float(v) for v in weights.achieved_imbalance]
    if tuning is not None:
        rep.diagnostics["tuning"] = tuning
    rep.diagnostics["lambdas"] = [float(v) for v in path.lambdas]
    return rep


def contrast(rep, rep_alt):
    """Difference of two level reports with variances added."""
    if rep.n != rep_alt.n or rep.T != rep_alt.T:
        raise ValueError("reports must come from the same panel and horizon")
    if rep.target is not None and rep.target[0] == rep_alt.target[0]:
        warnings.warn(
            "histories share their first assignment; the chi-squared contrast "
            "interval is not guaranteed to hold",
            UserWarning,
        )
    return EstimateReport(
        mu_hat=rep.mu_hat - rep_alt.mu_hat,
        v_hat=rep.v_hat + rep_alt.v_hat,
        v_hat_ho=rep.v_hat_ho + rep_alt.v_hat_ho,
        n=rep.n,
        T=rep.T,
        alpha=rep.alpha,
        quantile_mode=rep.quantile_mode,
        df=2 * rep.T,
        target=rep.target,
        target_alt=rep_alt.target,
        residual_summary={"target": rep.residual_summary, "alt": rep_alt.residual_summary},
        diagnostics={"target": rep.diagnostics, "alt": rep_alt.diagnostics},
        components=(rep, rep_alt),
    )


def ate_estimate(data, d, d_prime, cfg=None):
    """Estimate ``mu(d) - mu(d')`` with the chi-squared calibration on ``2T`` degrees."""
    d, d_prime = treatment_history(d), treatment_history(d_prime)
    if d == d_prime:
        raise ValueError("the two histories must differ")
    if len(d) != len(d_prime):
        raise ValueError("histories must have equal length")
    return contrast(dcb_estimate(data, d, cfg), dcb_estimate(data, d_prime, cfg))
