"""Penalized regression engines and the recursive coefficient path.

Lasso and penalized logistic regression both run cyclic coordinate descent
with covariance updates on internally standardised columns (see
:mod:`dcb._cd`). Coefficients are always reported on the original scale.
Columns flagged ``False`` in ``penalty_mask`` are never shrunk; a constant
unpenalised column acts as the intercept.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from . import _cd
from .errors import (
    ConvergenceWarning,
    EmptyStratum,
    SeparationDetected,
    SeparationWarning,
    TooFewRows,
)
from .panel import build_history, match_mask, treatment_history

PROB_CLIP = 1e-6


@dataclass
class LassoFit:
    coef: np.ndarray
    lam: float
    penalty_mask: np.ndarray
    intercept_index: int = None
    n_iter: int = 0
    converged: bool = True
    objective_history: np.ndarray = None

    def predict(self, X):
        return np.asarray(X, dtype=float) @ self.coef


@dataclass
class LogisticFit:
    coef: np.ndarray
    lam: float
    penalty_mask: np.ndarray
    intercept_index: int = None
    n_iter: int = 0
    converged: bool = True
    separated: bool = False

    def predict_proba(self, X, clip=PROB_CLIP):
        p = expit(np.asarray(X, dtype=float) @ self.coef)
        return np.clip(p, clip, 1.0 - clip)


@dataclass
class LassoConfig:
    """Settings shared by every Lasso fit of a coefficient path.

    ``lam=None`` selects the penalty by ``k``-fold cross-validation over a
    grid of ``n_lambda`` log-spaced values from ``lambda_max`` down to
    ``lambda_max * lambda_ratio``.
    """

    lam: float = None
    k: int = 5
    n_lambda: int = 50
    lambda_ratio: float = 1e-3
    tol: float = 1e-7
    max_iter: int = 10_000
    seed: int = 0


# ---------------------------------------------------------------------------
# standardisation


class _Standardized:
    """A least-squares problem moved to centred, unit mean-square columns."""

    def __init__(self, X, penalty_mask, weights=None):
        X = np.asarray(X, dtype=float)
        n, p = X.shape
        self.n, self.p = n, p
        mask = np.ones(p, dtype=bool) if penalty_mask is None else np.asarray(penalty_mask, bool)
        if mask.shape != (p,):
            raise ValueError("penalty_mask length must equal the number of columns")
        self.mask = mask
        spread = X.max(axis=0) - X.min(axis=0) if n else np.zeros(p)
        scale0 = np.maximum(1.0, np.abs(X).max(axis=0)) if n else np.ones(p)
        const = spread <= 1e-12 * scale0
        unpen_const = np.flatnonzero(const & ~mask & (np.abs(X[0]) > 0 if n else False))
        self.intercept_index = int(unpen_const[0]) if unpen_const.size else None
        self.center = self.intercept_index is not None
        if self.center:
            work = np.flatnonzero(~const)
            self.mean = X[:, work].mean(axis=0)
            Xw = X[:, work] - self.mean
        else:
            work = np.flatnonzero(np.abs(X).max(axis=0) > 0) if n else np.arange(0)
            self.mean = np.zeros(work.size)
            Xw = X[:, work]
        s = np.sqrt((Xw**2).mean(axis=0)) if n else np.ones(work.size)
        s[s == 0] = 1.0
        self.work = work
        self.scale = s
        self.Xs = Xw / s
        self.work_mask = mask[work]

    def gram(self):
        return self.Xs.T @ self.Xs / self.n

    def rhs(self, y):
        """Centred response and X's'y / n for a 1-d or 2-d response."""
        y = np.asarray(y, dtype=float)
        ymean = y.mean(axis=0) if self.center else np.zeros(y.shape[1:])
        yc = y - ymean
        return yc, ymean, self.Xs.T @ yc / self.n

    def to_original(self, b, ymean):
        """Map standardised coefficients (work columns) to the full design."""
        coef = np.zeros(self.p)
        bo = b / self.scale
        coef[self.work] = bo
        if self.center:
            const_val = self._const_value()
            coef[self.intercept_index] = (ymean - self.mean @ bo) / const_val
        return coef

    def _const_value(self):
        return self._const

    def set_const(self, X):
        if self.center:
            self._const = float(np.asarray(X)[0, self.intercept_index])


def _prepare(X, penalty_mask):
    st = _Standardized(X, penalty_mask)
    st.set_const(X)
    return st


def _lambda_max(G, c, mask):
    """Smallest penalty zeroing every penalised coefficient."""
    pen = np.flatnonzero(mask)
    if pen.size == 0:
        return 0.0
    free = np.flatnonzero(~mask)
    grad = c
    if free.size:
        b_free = np.linalg.lstsq(G[np.ix_(free, free)], c[free], rcond=None)[0]
        grad = c - G[:, free] @ b_free
    return float(np.max(np.abs(grad[pen])))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite input")


# ---------------------------------------------------------------------------
# Lasso


def lasso_fit(X, y, lam, penalty_mask=None, tol=1e-7, max_iter=10_000, track_objective=False):
    """Lasso by cyclic coordinate descent.

    Minimises ``(1/2n)||y - Xb||^2 + lam * sum_{j masked} s_j |b_j|`` where
    ``s_j`` is the root mean square of column ``j`` after centring (centring
    happens only when the design carries an unpenalised constant column).
    On a design whose columns already have unit mean square this is the
    textbook Lasso.

    A run that hits ``max_iter`` returns with ``converged=False`` and a
    :class:`ConvergenceWarning` instead of raising.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0] or X.shape[0] < 1:
        raise ValueError("X must be (n, p) and y (n,) with n >= 1")
    if lam < 0 or tol <= 0:
        raise ValueError("lam must be >= 0 and tol > 0")
    _check_finite(X, y)
    st = _prepare(X, penalty_mask)
    G = st.gram()
    yc, ymean, c = st.rhs(y)
    pen = np.where(st.work_mask, float(lam), 0.0)
    beta = np.zeros(st.work.size)
    yy = float(yc @ yc) / st.n
    n_iter, conv, hist = _cd.cd_gram(G, c, beta, pen, tol, max_iter, yy, track_objective)
    if not conv:
        warnings.warn(f"lasso did not converge in {max_iter} sweeps", ConvergenceWarning)
    return LassoFit(
        coef=st.to_original(beta, ymean),
        lam=float(lam),
        penalty_mask=st.mask.copy(),
        intercept_index=st.intercept_index,
        n_iter=int(n_iter),
        converged=bool(conv),
        objective_history=hist if track_objective else None,
    )


def lasso_objective(X, y, coef, lam, penalty_mask=None):
    """Objective of :func:`lasso_fit` evaluated on the original scale."""
    X = np.asarray(X, dtype=float)
    st = _prepare(X, penalty_mask)
    r = np.asarray(y, dtype=float) - X @ coef
    wts = np.zeros(X.shape[1])
    wts[st.work] = st.scale
    return 0.5 * float(r @ r) / X.shape[0] + lam * float(np.sum(wts[st.mask] * np.abs(coef[st.mask])))


def lambda_grid(X, y, penalty_mask=None, n_lambda=50, ratio=1e-3):
    """Descending log-spaced grid from ``lambda_max`` to ``lambda_max * ratio``."""
    st = _prepare(X, penalty_mask)
    _, _, c = st.rhs(y)
    lmax = _lambda_max(st.gram(), c if c.ndim == 1 else np.abs(c).max(axis=1), st.work_mask)
    if lmax <= 0:
        return np.zeros(1)
    return np.geomspace(lmax, lmax * ratio, n_lambda)


def _fold_ids(n, k, seed):
    rng = np.random.default_rng(seed)
    ids = np.empty(n, dtype=int)
    ids[rng.permutation(n)] = np.arange(n) % k
    return ids


def _path_errors(Xtr, Ytr, Xte, Yte, mask, grid, tol, max_iter):
    """Held-out squared error along the grid, one column per response."""
    st = _prepare(Xtr, mask)
    G = st.gram()
    Yc, ymean, C = st.rhs(Ytr)
    pens = np.outer(grid, st.work_mask.astype(float))
    q = Ytr.shape[1]
    err = np.empty((grid.size, q))
    Xte_w = (Xte[:, st.work] - st.mean) / st.scale if st.work.size else np.zeros((Xte.shape[0], 0))
    for r in range(q):
        B, _ = _cd.cd_path(G, np.ascontiguousarray(C[:, r]), pens, tol, max_iter)
        pred = Xte_w @ B.T + ymean[r]
        err[:, r] = np.mean((Yte[:, r : r + 1] - pred) ** 2, axis=0)
    return err


def cross_validate_lambda(
    X, y, penalty_mask=None, k=5, grid=None, seed=0, tol=1e-7, max_iter=10_000, return_curve=False
):
    """Pick the Lasso penalty by ``k``-fold cross-validation.

    Returns the grid value with the smallest mean held-out squared error;
    among equal errors the larger penalty wins. ``y`` may be 2-d, in which
    case one penalty per response column is returned (the folds and the
    Gram matrices are shared).
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    multi = y.ndim == 2
    Y = y if multi else y[:, None]
    n = X.shape[0]
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise TooFewRows(f"{n} rows cannot be split into {k} folds")
    _check_finite(X, Y)
    if grid is None:
        grids = [lambda_grid(X, Y[:, r], penalty_mask) for r in range(Y.shape[1])]
    else:
        grid = np.asarray(grid, dtype=float)
        if grid.size == 0 or np.any(grid < 0) or np.any(np.diff(grid) > 0):
            raise ValueError("grid must be nonempty, nonnegative and sorted descending")
        grids = [grid] * Y.shape[1]
    folds = _fold_ids(n, k, seed)
    same_grid = all(g is grids[0] or np.array_equal(g, grids[0]) for g in grids)
    cv = [np.zeros(g.size) for g in grids]
    for f in range(k):
        tr, te = folds != f, folds == f
        if same_grid:
            err = _path_errors(X[tr], Y[tr], X[te], Y[te], penalty_mask, grids[0], tol, max_iter)
            for r in range(Y.shape[1]):
                cv[r] += err[:, r] / k
        else:
            for r in range(Y.shape[1]):
                err = _path_errors(
                    X[tr], Y[tr][:, [r]], X[te], Y[te][:, [r]], penalty_mask, grids[r], tol, max_iter
                )
                cv[r] += err[:, 0] / k
    best = [float(grids[r][int(np.argmin(cv[r]))]) for r in range(Y.shape[1])]
    out = np.array(best) if multi else best[0]
    if return_curve:
        return out, (grids if multi else grids[0]), (cv if multi else cv[0])
    return out


def lasso_cv_fit(X, y, penalty_mask=None, cfg=None):
    """Cross-validated (or fixed-penalty) Lasso fit per ``cfg``."""
    cfg = cfg or LassoConfig()
    if cfg.lam is not None:
        lam = cfg.lam
    else:
        X = np.asarray(X, dtype=float)
        k = min(cfg.k, X.shape[0])
        if k < 2:
            raise TooFewRows(f"{X.shape[0]} rows are too few for cross-validation")
        grid = lambda_grid(X, y, penalty_mask, cfg.n_lambda, cfg.lambda_ratio)
        lam = cross_validate_lambda(X, y, penalty_mask, k, grid, cfg.seed, cfg.tol, cfg.max_iter)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return lasso_fit(X, y, lam, penalty_mask, cfg.tol, cfg.max_iter)


def lasso_cv_multi(X, Y, penalty_mask=None, cfg=None):
    """Cross-validated Lasso for each column of ``Y`` on a shared design.

    Returns the coefficient matrix of shape (p, q).
    """
    cfg = cfg or LassoConfig()
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    st = _prepare(X, penalty_mask)
    G = st.gram()
    Yc, ymean, C = st.rhs(Y)
    q = Y.shape[1]
    if cfg.lam is not None:
        lams = np.full(q, float(cfg.lam))
        grids = None
    else:
        k = min(cfg.k, X.shape[0])
        if k < 2:
            raise TooFewRows(f"{X.shape[0]} rows are too few for cross-validation")
        lmax = max(_lambda_max(G, C[:, r], st.work_mask) for r in range(q))
        grid = np.geomspace(lmax, lmax * cfg.lambda_ratio, cfg.n_lambda) if lmax > 0 else np.zeros(1)
        lams = cross_validate_lambda(X, Y, penalty_mask, k, grid, cfg.seed, cfg.tol, cfg.max_iter)
        grids = grid
    coefs = np.empty((X.shape[1], q))
    for r in range(q):
        if grids is not None:
            steps = grids[grids >= lams[r]]
        else:
            steps = np.array([lams[r]])
        pens = np.outer(steps, st.work_mask.astype(float))
        B, _ = _cd.cd_path(G, np.ascontiguousarray(C[:, r]), pens, cfg.tol, cfg.max_iter)
        coefs[:, r] = st.to_original(B[-1], ymean[r])
    return coefs


# ---------------------------------------------------------------------------
# penalised logistic regression


def _neg_loglik(eta, d):
    # mean of log(1 + e^eta) - d * eta, computed stably
    return float(np.mean(np.logaddexp(0.0, eta) - d * eta))


def logistic_fit(X, d, lam=0.0, penalty_mask=None, tol=1e-7, max_iter=100, coef_cap=30.0):
    """L1-penalised logistic regression by proximal Newton steps.

    Each outer step forms the weighted least-squares approximation of the
    log-likelihood and solves it with coordinate descent, followed by a
    backtracking line search on the penalised objective. Convergence is
    judged on the proximal-gradient map.

    Raises :class:`SeparationDetected` when ``d`` is constant. If the
    standardised coefficients exceed ``coef_cap`` (quasi-separation with a
    weak or zero penalty) they are clipped, ``separated`` is set and a
    :class:`SeparationWarning` is issued.
    """
    X = np.asarray(X, dtype=float)
    d = np.asarray(d, dtype=float)
    if X.ndim != 2 or d.shape != (X.shape[0],):
        raise ValueError("X must be (n, p) and d (n,)")
    if not np.all(np.isin(d, (0.0, 1.0))):
        raise ValueError("d must be binary")
    if lam < 0:
        raise ValueError("lam must be >= 0")
    _check_finite(X)
    if d.min() == d.max():
        raise SeparationDetected(f"response is constant ({int(d[0])}); logistic MLE does not exist")
    st = _prepare(X, penalty_mask)
    n = X.shape[0]
    # work design with an explicit unpenalised intercept when centring
    if st.center:
        Z = np.hstack([np.ones((n, 1)), st.Xs])
        zmask = np.concatenate([[False], st.work_mask])
    else:
        Z = st.Xs
        zmask = st.work_mask
    pen = np.where(zmask, float(lam), 0.0)
    b = np.zeros(Z.shape[1])
    if st.center:
        pbar = d.mean()
        b[0] = np.log(pbar / (1 - pbar))

    def objective(bb):
        return _neg_loglik(Z @ bb, d) + float(pen @ np.abs(bb))

    obj = objective(b)
    converged = separated = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = Z @ b
        p = expit(eta)
        w = np.maximum(p * (1 - p), 1e-5)
        zresp = eta + (d - p) / w
        Zw = Z * w[:, None]
        G = Zw.T @ Z / n
        c = Zw.T @ zresp / n
        bn = b.copy()
        _cd.cd_gram(G, c, bn, pen, tol * 0.1, 10_000, 0.0, False)
        step = 1.0
        direction = bn - b
        while step > 1e-8:
            cand = b + step * direction
            new_obj = objective(cand)
            if new_obj <= obj + 1e-12:
                break
            step *= 0.5
        else:
            cand, new_obj = b, obj
        if np.max(np.abs(cand)) > coef_cap:
            cand = np.clip(cand, -coef_cap, coef_cap)
            separated = True
            b = cand
            break
        b, obj = cand, new_obj
        # proximal-gradient map
        grad = Z.T @ (expit(Z @ b) - d) / n
        u = b - grad
        prox = np.sign(u) * np.maximum(np.abs(u) - pen, 0.0)
        if np.max(np.abs(prox - b)) < tol or np.max(np.abs(step * direction)) < tol:
            converged = True
            break
    if separated:
        warnings.warn("logistic coefficients diverged and were capped", SeparationWarning)
    # back to the original scale
    coef = np.zeros(X.shape[1])
    if st.center:
        slopes = b[1:] / st.scale
        coef[st.work] = slopes
        coef[st.intercept_index] = (b[0] - st.mean @ slopes) / st._const
    else:
        coef[st.work] = b / st.scale
    return LogisticFit(
        coef=coef,
        lam=float(lam),
        penalty_mask=st.mask.copy(),
        intercept_index=st.intercept_index,
        n_iter=it,
        converged=converged,
        separated=separated,
    )


def cross_validate_logistic_lambda(X, d, penalty_mask=None, k=5, n_lambda=12, ratio=1e-2, seed=0):
    """Penalty for :func:`logistic_fit` minimising held-out deviance."""
    X = np.asarray(X, dtype=float)
    d = np.asarray(d, dtype=float)
    n = X.shape[0]
    if n < k:
        raise TooFewRows(f"{n} rows cannot be split into {k} folds")
    st = _prepare(X, penalty_mask)
    pen_cols = st.work_mask
    lmax = float(np.max(np.abs(st.Xs[:, pen_cols].T @ (d - d.mean())) / n)) if pen_cols.any() else 0.0
    if lmax <= 0:
        return 0.0
    grid = np.geomspace(lmax, lmax * ratio, n_lambda)
    folds = _fold_ids(n, k, seed)
    dev = np.zeros(grid.size)
    for f in range(k):
        tr, te = folds != f, folds == f
        if d[tr].min() == d[tr].max():
            continue
        for gi, lam in enumerate(grid):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = logistic_fit(X[tr], d[tr], lam, penalty_mask, tol=1e-5, max_iter=50)
            pr = fit.predict_proba(X[te])
            dev[gi] -= np.sum(d[te] * np.log(pr) + (1 - d[te]) * np.log(1 - pr))
    return float(grid[int(np.argmin(dev))])


# ---------------------------------------------------------------------------
# coefficient path


@dataclass
class CoefficientPath:
    """Per-period projection coefficients for one target history.

    ``betas[t-1]`` are the coefficients of the period-``t`` regression and
    ``col_names[t-1]`` label them (in linear mode the last entry is the
    period-``t`` treatment). ``fitted[:, t-1]`` holds the counterfactual
    prediction ``H_t(d_{1:t-1}) beta_t`` for every unit; only units with
    ``D_{1:t-1} = d_{1:t-1}`` enter the estimator.
    """

    target: tuple
    mode: str
    betas: list
    fitted: np.ndarray
    lambdas: list
    col_names: list
    history_cols: list = field(default_factory=list)

    @property
    def T(self):
        return len(self.target)

    def history_coef(self, t):
        """Coefficients attached to the columns of ``H_t`` (1-based ``t``)."""
        return self.betas[t - 1][self.history_cols[t - 1]]

    def to_dict(self):
        return {
            "target": list(self.target),
            "mode": self.mode,
            "lambdas": [float(v) for v in self.lambdas],
            "betas": [
                dict(zip(names, map(float, b))) for names, b in zip(self.col_names, self.betas)
            ],
        }


def _penalty_mask(H, extra_unpenalized=0):
    mask = np.ones(H.width + extra_unpenalized, dtype=bool)
    mask[H.columns("treatment")] = False
    mask[H.columns("intercept")] = False
    if extra_unpenalized:
        mask[H.width :] = False
    return mask


def fit_coefficient_path(data, d, mode="linear", lasso_cfg=None, intercept=True, interactions=False):
    """Estimate the projection coefficients recursively from ``T`` down to 1.

    ``full_interactions``: regress ``Y_T`` on ``H_T`` over units following
    the whole target path, then for ``t = T-1 .. 1`` regress the fitted
    ``H_{t+1} beta_{t+1}`` on ``H_t`` over units following ``d_{1:t}``.

    ``linear``: use every unit, adding the period-``t`` treatment as an
    unpenalised regressor (past treatments and the intercept are unpenalised
    too) and predicting with ``d_t`` substituted for it.
    """
    d = treatment_history(d)
    T = len(d)
    if T > data.T:
        raise ValueError(f"history of length {T} exceeds panel length {data.T}")
    if mode not in ("linear", "full_interactions"):
        raise ValueError(f"unknown mode {mode!r}")
    cfg = lasso_cfg or LassoConfig()
    n = data.n
    Hs = [build_history(data, t, intercept, interactions) for t in range(1, T + 1)]
    fitted = np.empty((n, T))
    betas, lams, names, hist_cols = [None] * T, [None] * T, [None] * T, [None] * T
    response = data.y[:, T - 1].astype(float)
    for t in range(T, 0, -1):
        H = Hs[t - 1]
        seed_cfg = LassoConfig(**{**cfg.__dict__, "seed": cfg.seed + t})
        if mode == "full_interactions":
            rows = match_mask(data, d[:t])
            if not rows.any():
                raise EmptyStratum(d[:t])
            X = H.values
            mask = _penalty_mask(H)
            fit = lasso_cv_fit(X[rows], response[rows], mask, seed_cfg)
            fitted[:, t - 1] = X @ fit.coef
            names[t - 1] = H.col_names
            hist_cols[t - 1] = np.arange(H.width)
        else:
            # needs both arms of D_t among units following d_{1:t-1}
            if not match_mask(data, d[:t]).any():
                raise EmptyStratum(d[:t])
            X = np.hstack([H.values, data.d[:, [t - 1]].astype(float)])
            mask = _penalty_mask(H, extra_unpenalized=1)
            fit = lasso_cv_fit(X, response, mask, seed_cfg)
            Xcf = X.copy()
            Xcf[:, -1] = d[t - 1]
            fitted[:, t - 1] = Xcf @ fit.coef
            names[t - 1] = H.col_names + (f"d{t}",)
            hist_cols[t - 1] = np.arange(H.width)
        betas[t - 1] = fit.coef
        lams[t - 1] = fit.lam
        response = fitted[:, t - 1]
    if not np.all(np.isfinite(fitted)):
        raise FloatingPointError("non-finite fitted values in coefficient path")
    return CoefficientPath(d, mode, betas, fitted, lams, names, hist_cols)
