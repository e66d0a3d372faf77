"""Simulation designs and the Monte Carlo experiment runner.

Covariates follow a Gaussian AR(1) process, treatments a logistic model in
past covariates and centred past treatments, and outcomes a linear (or a
softplus, misspecified) recursion in covariates, lagged outcomes and
treatments. All randomness is drawn up front so potential outcomes under
any treatment path share the same noise.
"""

import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .panel import PanelDataset, treatment_history

BETA_DESIGNS = ("sparse", "moderate", "harmonic")


def coefficient_vector(design, p):
    """Unit-norm outcome coefficients for one of the three designs."""
    j = np.arange(1, p + 1, dtype=float)
    if design == "sparse":
        b = (j <= 10).astype(float)
    elif design == "moderate":
        b = 1.0 / j**2
    elif design == "harmonic":
        b = 1.0 / j
    else:
        raise ValueError(f"unknown beta design {design!r}; expected one of {BETA_DESIGNS}")
    return b / np.linalg.norm(b)


def propensity_direction(p):
    phi = 1.0 / np.arange(1, p + 1)
    return phi / np.linalg.norm(phi)


def default_lags(T):
    """Lagged-outcome coefficients ``{t: {r: coef on Y_r}}``.

    Every equation loads on the previous outcome with coefficient 1 and the
    period-3 equation also on ``Y_1`` with coefficient 0.5.
    """
    lags = {1: {}, 2: {1: 1.0}, 3: {2: 1.0, 1: 0.5}}
    return {t: dict(lags.get(t, {t - 1: 1.0})) for t in range(1, T + 1)}


@dataclass
class SimConfig:
    """Parameters of the simulation design."""

    n: int = 400
    T: int = 2
    p: int = 100
    eta: float = 0.1
    treat_lags: tuple = (0.5, 0.25)
    beta_design: str = "sparse"
    tau: float = 1.0
    lags: dict = None
    misspecified: bool = False
    seed: int = 0
    noise_sd: float = 1.0
    xi_sd: float = 1.0
    truth_draws: int = 200

    def __post_init__(self):
        if self.n < 2:
            raise ValueError("n must be at least 2")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if self.p < 1:
            raise ValueError("p must be at least 1")
        if self.eta < 0:
            raise ValueError("eta must be nonnegative")
        if self.beta_design not in BETA_DESIGNS:
            raise ValueError(f"unknown beta design {self.beta_design!r}")
        if self.lags is None:
            self.lags = default_lags(self.T)
        else:
            self.lags = {int(t): {int(r): float(c) for r, c in v.items()} for t, v in self.lags.items()}
        self.treat_lags = tuple(float(v) for v in self.treat_lags)
        if len(self.treat_lags) < self.T - 1:
            raise ValueError("need one lagged-treatment coefficient per earlier period")

    @property
    def beta(self):
        return coefficient_vector(self.beta_design, self.p)

    @property
    def phi(self):
        return propensity_direction(self.p)

    def to_dict(self):
        out = asdict(self)
        out["lags"] = {str(t): {str(r): c for r, c in v.items()} for t, v in self.lags.items()}
        out["treat_lags"] = list(self.treat_lags)
        return out


def _ar_cholesky(p, rho=0.5):
    idx = np.arange(p)
    return np.linalg.cholesky(rho ** np.abs(idx[:, None] - idx[None, :]))


def _rng(seed):
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(ss)), ss


def softplus(z):
    return np.logaddexp(0.0, z)


@dataclass
class Oracle:
    """Ground truth attached to a simulated panel.

    ``propensity[:, t-1]`` is the probability that ``D_t = 1`` given the
    realised past and the assignment shock. ``outcomes(d)`` returns the
    potential outcomes of every unit under path ``d`` with the common noise.
    """

    cfg: SimConfig
    x: np.ndarray
    theta_base: np.ndarray
    xi: np.ndarray
    d_bar: np.ndarray
    propensity: np.ndarray
    eps: np.ndarray
    truth_seed: object = None
    _mu_cache: dict = field(default_factory=dict)

    def outcomes(self, d, x=None, eps=None):
        d = treatment_history(d)
        x = self.x if x is None else x
        eps = self.eps if eps is None else eps
        return _outcome_recursion(self.cfg, x, np.asarray(d, float), eps)

    def path_propensity(self, d):
        """Per-period probability of following ``d`` (counterfactual history).

        Shape (n, len(d)): entry ``t-1`` is ``P(D_t = d_t)`` with the past
        treatments set to ``d_{1:t-1}``.
        """
        d = treatment_history(d)
        cfg = self.cfg
        out = np.empty((self.x.shape[0], len(d)))
        for t in range(1, len(d) + 1):
            theta = self.theta_base[:, t - 1] + self.xi[:, t - 1]
            for s in range(1, t):
                theta = theta + cfg.treat_lags[s - 1] * (d[s - 1] - self.d_bar[s - 1])
            p1 = expit(-theta)
            out[:, t - 1] = p1 if d[t - 1] == 1 else 1.0 - p1
        return out

    def assignment_propensity(self, d):
        """``P(D_t = d_t | realised past)`` per unit and period, shape (n, len(d))."""
        d = np.asarray(treatment_history(d))
        p1 = self.propensity[:, : d.size]
        return np.where(d[None, :] == 1, p1, 1.0 - p1)

    def mu(self, d):
        """Mean potential outcome at the last period of ``d``, given baseline covariates."""
        d = treatment_history(d)
        if d not in self._mu_cache:
            self._mu_cache[d] = float(np.mean(self.conditional_mean(d)))
        return self._mu_cache[d]

    def conditional_mean(self, d):
        """``E[Y_T(d) | X_1]`` per unit."""
        d = treatment_history(d)
        cfg = self.cfg
        n, _, p = self.x.shape
        T = len(d)
        if not cfg.misspecified:
            # linear recursion: plug in conditional means of the future
            xm = np.empty((n, T, p))
            for t in range(T):
                xm[:, t] = 0.5**t * self.x[:, 0]
            return _outcome_recursion(cfg, xm, np.asarray(d, float), np.zeros((n, T)))[:, -1]
        rng, _ = _rng(self.truth_seed)
        acc = np.zeros(n)
        for _ in range(cfg.truth_draws):
            x = np.empty((n, T, p))
            x[:, 0] = self.x[:, 0]
            for t in range(1, T):
                x[:, t] = 0.5 * x[:, t - 1] + rng.standard_normal((n, p))
            e = cfg.noise_sd * rng.standard_normal((n, T))
            acc += _outcome_recursion(cfg, x, np.asarray(d, float), e)[:, -1]
        return acc / cfg.truth_draws

    def ate(self, d, d_alt):
        return self.mu(d) - self.mu(d_alt)


def _outcome_recursion(cfg, x, d, eps):
    """Outcomes for all units under path ``d`` (broadcast over units)."""
    n = x.shape[0]
    T = d.shape[-1]
    d = np.broadcast_to(d, (n, T))
    beta = cfg.beta
    xb = np.einsum("ntp,p->nt", x[:, :T], beta)
    y = np.zeros((n, T))
    for t in range(1, T + 1):
        if cfg.misspecified:
            val = softplus(-2.0 - 2.0 * xb[:, :t]).sum(axis=1)
            for r in range(1, t):
                val = val + softplus(-2.0 - 2.0 * y[:, r - 1])
        else:
            val = xb[:, :t].sum(axis=1)
            for r, c in cfg.lags.get(t, {}).items():
                val = val + c * y[:, r - 1]
        y[:, t - 1] = val + cfg.tau * d[:, :t].sum(axis=1) + eps[:, t - 1]
    return y


def generate_dataset(cfg, seed=None):
    """Draw one panel from the design and return ``(PanelDataset, Oracle)``.

    ``seed`` (int or ``SeedSequence``) defaults to ``cfg.seed``. The noise
    is drawn in a fixed order so datasets are reproducible bit for bit.
    """
    rng, ss = _rng(cfg.seed if seed is None else seed)
    n, T, p = cfg.n, cfg.T, cfg.p
    x = np.empty((n, T, p))
    x[:, 0] = rng.standard_normal((n, p)) @ _ar_cholesky(p).T
    for t in range(1, T):
        x[:, t] = 0.5 * x[:, t - 1] + rng.standard_normal((n, p))
    xi = cfg.xi_sd * rng.standard_normal((n, T))
    unif = rng.random((n, T))
    eps = cfg.noise_sd * rng.standard_normal((n, T))
    truth_seed = ss.spawn(1)[0]

    phi = cfg.phi
    theta_base = cfg.eta * np.cumsum(x @ phi, axis=1)
    d = np.zeros((n, T), dtype=np.int8)
    d_bar = np.zeros(T)
    prop = np.empty((n, T))
    for t in range(T):
        theta = theta_base[:, t] + xi[:, t]
        for s in range(t):
            theta = theta + cfg.treat_lags[s] * (d[:, s] - d_bar[s])
        prop[:, t] = expit(-theta)
        d[:, t] = unif[:, t] < prop[:, t]
        d_bar[t] = d[:, t].mean()
    y = _outcome_recursion(cfg, x, d.astype(float), eps)
    oracle = Oracle(cfg, x, theta_base, xi, d_bar, prop, eps, truth_seed)
    return PanelDataset(x, d, y), oracle


# ---------------------------------------------------------------------------
# experiments

METHOD_LABELS = {
    "dcb": "DCB",
    "aipw_star": "aIPW*",
    "aipwh": "aIPWh",
    "aipwl": "aIPWl",
    "ipwh": "IPWh",
    "seq": "Seq.Est",
    "lasso": "Lasso",
}
METHODS = tuple(METHOD_LABELS)
PROFILES = {
    "desk": {"n": 200, "p": 50, "replicates": 100},
    "full": {"n": 400, "p": 100, "replicates": 200},
}


def check_methods(methods):
    bad = [m for m in methods if m not in METHOD_LABELS]
    if bad:
        raise ValueError(f"unknown method(s) {bad}; valid methods: {', '.join(METHODS)}")
    return list(methods)


def replicate_seeds(seed, replicates):
    """Child seeds, one per replicate, independent of scheduling."""
    return np.random.SeedSequence(seed).spawn(replicates)


def _interval_record(rep):
    from .estimator import critical_value

    out = {"estimate": rep.mu_hat, "v_he": rep.v_hat, "v_ho": rep.v_hat_ho, "df": rep.df, "n": rep.n}
    out["q_chi"] = critical_value(rep.df, rep.alpha, "chi_squared")
    out["q_gauss"] = critical_value(rep.df, rep.alpha, "gaussian")
    return out


def run_replicate(cfg, methods, seed, alpha=0.05, dcb_cfg=None):
    """Estimate the all-treated vs never-treated contrast with each method.

    Returns a JSON-ready record. Failures of a method are recorded as a
    message and do not stop the replicate.
    """
    from .competitors import (
        PropensityModel,
        aipw_estimate,
        ipw_estimate,
        naive_lasso_estimate,
        sequential_estimate,
    )
    from .errors import DCBError
    from .estimator import DCBConfig, contrast, dcb_estimate
    from .regression import fit_coefficient_path

    data, oracle = generate_dataset(cfg, seed)
    d1, d0 = (1,) * cfg.T, (0,) * cfg.T
    rec = {
        "truth": {"contrast": oracle.ate(d1, d0), "level": oracle.mu(d1)},
        "methods": {},
        "failures": {},
    }
    dcb_cfg = dcb_cfg or DCBConfig(alpha=alpha)
    cache = {}

    def paths():
        if "paths" not in cache:
            cache["paths"] = [fit_coefficient_path(data, h, dcb_cfg.mode, dcb_cfg.lasso) for h in (d1, d0)]
        return cache["paths"]

    def propensity(kind):
        if kind not in cache:
            if kind == "known":
                cache[kind] = PropensityModel.known(oracle.propensity)
            else:
                cache[kind] = PropensityModel.fit(data, cfg.T, penalized=kind == "penalized")
        return cache[kind]

    def aipw(kind):
        p1, p0 = paths()
        pm = propensity(kind)
        r1 = aipw_estimate(data, d1, pm, p1, alpha)
        r0 = aipw_estimate(data, d0, pm, p0, alpha)
        return r1, r0

    for m in methods:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                if m == "dcb":
                    p1, p0 = paths()
                    r1 = dcb_estimate(data, d1, dcb_cfg, p1)
                    r0 = dcb_estimate(data, d0, dcb_cfg, p0)
                    rec["methods"][m] = {
                        "contrast": _interval_record(contrast(r1, r0)),
                        "level": _interval_record(r1),
                    }
                elif m in ("aipw_star", "aipwh", "aipwl"):
                    kind = {"aipw_star": "known", "aipwh": "penalized", "aipwl": "logistic"}[m]
                    r1, r0 = aipw(kind)
                    rec["methods"][m] = {
                        "contrast": _interval_record(contrast(r1, r0)),
                        "level": _interval_record(r1),
                    }
                elif m == "ipwh":
                    pm = propensity("penalized")
                    r1 = ipw_estimate(data, d1, pm, alpha)
                    r0 = ipw_estimate(data, d0, pm, alpha)
                    rec["methods"][m] = {
                        "contrast": {"estimate": r1.mu_hat - r0.mu_hat},
                        "level": {"estimate": r1.mu_hat},
                    }
                elif m == "lasso":
                    rec["methods"][m] = {
                        "contrast": {"estimate": naive_lasso_estimate(data, d1, d0)},
                        "level": {"estimate": naive_lasso_estimate(data, d1)},
                    }
                elif m == "seq":
                    s1 = sequential_estimate(data, d1)
                    s0 = sequential_estimate(data, d0)
                    rec["methods"][m] = {
                        "contrast": {"estimate": s1 - s0},
                        "level": {"estimate": s1},
                    }
        except (DCBError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            rec["failures"][m] = f"{type(exc).__name__}: {exc}"
    return rec


def _run_one(args):
    cfg, methods, seed, alpha, dcb_cfg = args
    return run_replicate(cfg, methods, seed, alpha, dcb_cfg)


def run_replicates(cfg, methods, replicates, workers=1, alpha=0.05, dcb_cfg=None, progress=None):
    """Per-replicate records in replicate order."""
    methods = check_methods(methods)
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    jobs = [(cfg, methods, s, alpha, dcb_cfg) for s in replicate_seeds(cfg.seed, replicates)]
    records = []
    if workers <= 1:
        for i, job in enumerate(jobs):
            records.append(_run_one(job))
            if progress:
                progress(i + 1, replicates)
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for i, rec in enumerate(ex.map(_run_one, jobs)):
                records.append(rec)
                if progress:
                    progress(i + 1, replicates)
    return records


@dataclass
class MethodSummary:
    mse: float
    bias: float
    replicates: int
    failures: int
    coverage_chi: float = None
    coverage_gauss: float = None
    coverage_chi_ho: float = None
    coverage_gauss_ho: float = None
    mean_ci_width: float = None


@dataclass
class ExperimentResult:
    """Per-method summaries plus the raw per-replicate records."""

    config: SimConfig
    target: str
    alpha: float
    methods: dict
    records: list

    def to_dict(self):
        return {
            "config": self.config.to_dict(),
            "target": self.target,
            "alpha": self.alpha,
            "methods": {k: asdict(v) for k, v in self.methods.items()},
            "records": self.records,
        }


def summarize(records, methods, target="contrast", cfg=None, alpha=0.05):
    """Aggregate per-replicate records into an :class:`ExperimentResult`."""
    if target not in ("contrast", "level"):
        raise ValueError("target must be 'contrast' or 'level'")
    out = {}
    for m in methods:
        errs, cov = [], {"chi_he": [], "gauss_he": [], "chi_ho": [], "gauss_ho": []}
        widths = []
        fails = 0
        for rec in records:
            if m not in rec["methods"]:
                fails += 1
                continue
            r = rec["methods"][m][target]
            truth = rec["truth"][target]
            errs.append(r["estimate"] - truth)
            if "v_he" in r:
                for var in ("he", "ho"):
                    se = math.sqrt(r[f"v_{var}"] / r["n"])
                    for mode in ("chi", "gauss"):
                        half = r[f"q_{mode}"] * se
                        cov[f"{mode}_{var}"].append(abs(r["estimate"] - truth) <= half)
                    if var == "he":
                        widths.append(2 * r["q_chi"] * se)
        errs = np.asarray(errs)
        summary = MethodSummary(
            mse=float(np.mean(errs**2)) if errs.size else float("nan"),
            bias=float(np.mean(errs)) if errs.size else float("nan"),
            replicates=int(errs.size),
            failures=fails,
        )
        if widths:
            summary.coverage_chi = float(np.mean(cov["chi_he"]))
            summary.coverage_gauss = float(np.mean(cov["gauss_he"]))
            summary.coverage_chi_ho = float(np.mean(cov["chi_ho"]))
            summary.coverage_gauss_ho = float(np.mean(cov["gauss_ho"]))
            summary.mean_ci_width = float(np.mean(widths))
        out[m] = summary
    return ExperimentResult(cfg, target, alpha, out, records)


def run_mse_experiment(cfg, methods=METHODS, replicates=100, workers=1, dcb_cfg=None, progress=None):
    """Mean squared error of each method for the all-treated vs never-treated contrast."""
    if replicates < 2:
        raise ValueError("replicates must be >= 2")
    recs = run_replicates(cfg, methods, replicates, workers, dcb_cfg=dcb_cfg, progress=progress)
    return summarize(recs, check_methods(methods), "contrast", cfg)


def run_coverage_experiment(
    cfg, target="contrast", replicates=100, alpha=0.05, methods=("dcb",), workers=1, dcb_cfg=None, progress=None
):
    """Coverage of chi-squared and Gaussian intervals (both variance types)."""
    if replicates < 2:
        raise ValueError("replicates must be >= 2")
    recs = run_replicates(cfg, methods, replicates, workers, alpha, dcb_cfg, progress)
    return summarize(recs, check_methods(methods), target, cfg, alpha)


def propensity_summary(cfg, seeds):
    """Five-number summary of the joint probability of the all-treated path.

    Per unit the probability is the product over periods of
    ``P(D_t = 1 | realised past)``; quantiles are averaged over ``seeds``.
    """
    qs = []
    for s in seeds:
        _, oracle = generate_dataset(cfg, s)
        joint = oracle.propensity.prod(axis=1)
        qs.append(np.quantile(joint, [0.0, 0.25, 0.5, 0.75, 1.0]))
    q = np.mean(qs, axis=0)
    return dict(zip(("min", "q1", "median", "q3", "max"), map(float, q)))


# ---------------------------------------------------------------------------
# configuration files and output tables

_SIM_KEYS = {f for f in SimConfig.__dataclass_fields__}
_RUN_KEYS = {"replicates", "methods", "target", "alpha", "workers", "profile"}


def _parse_value(raw):
    raw = raw.strip()
    if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
        return raw[1:-1]
    low = raw.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def parse_config(text):
    """Parse a flat ``key = value`` experiment file.

    Section headers and ``#``/``;`` comments are ignored. Returns
    ``(SimConfig keyword arguments, run settings)``.
    """
    sim, run = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.split("#", 1)[0].split(";", 1)[0].strip()
        if not s or (s.startswith("[") and s.endswith("]")):
            continue
        if "=" not in s:
            raise ValueError(f"line {lineno}: expected key = value")
        key, val = (part.strip() for part in s.split("=", 1))
        value = _parse_value(val)
        if key in ("methods", "treat_lags"):
            items = [v.strip() for v in str(value).strip("[]").split(",") if v.strip()]
            value = items if key == "methods" else tuple(float(v) for v in items)
        if key in _SIM_KEYS and key != "lags":
            sim[key] = value
        elif key in _RUN_KEYS:
            run[key] = value
        else:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
    return sim, run


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 12))
    return str(v)


def write_tables(result, out_dir, prefix=""):
    """Write the MSE table, the coverage table and the JSON sidecar.

    Returns the list of paths written.
    """
    os.makedirs(out_dir, exist_ok=True)
    mse_path = os.path.join(out_dir, f"{prefix}mse.csv")
    cov_path = os.path.join(out_dir, f"{prefix}coverage.csv")
    json_path = os.path.join(out_dir, f"{prefix}records.json")
    with open(mse_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("method,label,mse,bias,replicates,failures\n")
        for m, s in result.methods.items():
            row = [m, METHOD_LABELS[m], s.mse, s.bias, s.replicates, s.failures]
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    with open(cov_path, "w", encoding="utf-8", newline="") as fh:
        fh.write("method,label,target,variance,mode,coverage,mean_ci_width\n")
        for m, s in result.methods.items():
            if s.coverage_chi is None:
                continue
            for var, chi, gauss in (
                ("he", s.coverage_chi, s.coverage_gauss),
                ("ho", s.coverage_chi_ho, s.coverage_gauss_ho),
            ):
                for mode, c in (("chi", chi), ("gauss", gauss)):
                    row = [m, METHOD_LABELS[m], result.target, var, mode, c, s.mean_ci_width]
                    fh.write(",".join(_fmt(v) for v in row) + "\n")
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(result.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    return [mse_path, cov_path, json_path]
