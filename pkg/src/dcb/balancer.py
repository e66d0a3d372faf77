"""Sequential balancing weights, the stabilized-IPW feasible point and the
tuning search over balance slacks.

Weights at period ``t`` are the minimum-norm point of the capped simplex on
units following ``d_{1:t}`` whose weighted history moments stay within
``delta`` of the moments under the period ``t-1`` weights (uniform weights
``1/n`` over the whole sample at ``t = 1``).
"""

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import EmptyStratum, Infeasible, NoFeasiblePoint, ZeroDenominator
from .panel import HistoryMatrix, build_history, match_mask, treatment_history
from .qp import FEAS_TOL, least_infeasible, solve_balance_qp

INVARIANT_TOL = 1e-10


def base_delta(n, p):
    """Default slack ``log(n p) / n^(1/4)``."""
    return math.log(n * p) / n**0.25


def default_cap(n, t, K2=None):
    """Weight cap ``K_{2,t} log(n) n^(-2/3)`` with ``K_{2,t} = 2^(t-1)`` by default."""
    k = 2.0 ** (t - 1) if K2 is None else K2
    return k * math.log(n) * n ** (-2.0 / 3.0)


@dataclass
class BalanceConfig:
    """Per-period balancing settings.

    ``delta[t-1]`` is the slack at period ``t``: a scalar or one value per
    history column. The effective slack is ``K1[t-1] * delta[t-1]``.
    ``cap[t-1] = None`` uses :func:`default_cap` with ``K2[t-1]``.
    """

    delta: list
    cap: list = None
    K1: list = None
    K2: list = None
    qp_tol: float = 1e-8
    max_iter: int = 20_000
    intercept: bool = True
    interactions: bool = False

    def __post_init__(self):
        T = len(self.delta)
        if self.cap is None:
            self.cap = [None] * T
        if self.K1 is None:
            self.K1 = [1.0] * T
        if self.K2 is None:
            self.K2 = [2.0**t for t in range(T)]
        if not (len(self.cap) == len(self.K1) == len(self.K2) == T):
            raise ValueError("per-period lists must have equal length")
        for dl in self.delta:
            if np.any(np.asarray(dl, dtype=float) <= 0):
                raise ValueError("delta must be positive")
        if self.qp_tol <= 0:
            raise ValueError("qp_tol must be positive")

    @classmethod
    def default(cls, data, T=None):
        """Slack ``log(n p_t) / n^(1/4)`` per period, ``p_t`` the history width."""
        T = data.T if T is None else T
        deltas = [
            base_delta(data.n, build_history(data, t).width) for t in range(1, T + 1)
        ]
        return cls(delta=deltas)

    def effective_delta(self, t, width):
        d = np.broadcast_to(np.asarray(self.delta[t - 1], dtype=float), (width,))
        return self.K1[t - 1] * d

    def effective_cap(self, n, t):
        c = self.cap[t - 1]
        return default_cap(n, t, self.K2[t - 1]) if c is None else float(c)

    def to_dict(self):
        def plain(v):
            a = np.asarray(v, dtype=float)
            return float(a) if a.ndim == 0 else [float(x) for x in a]

        return {
            "delta": [plain(v) for v in self.delta],
            "cap": [None if c is None else float(c) for c in self.cap],
            "K1": [float(k) for k in self.K1],
            "K2": [float(k) for k in self.K2],
            "qp_tol": self.qp_tol,
            "max_iter": self.max_iter,
        }


@dataclass
class StepResult:
    gamma: np.ndarray
    feasible: bool
    gaps: np.ndarray
    bound: np.ndarray
    achieved_imbalance: float
    cap: float
    kkt_residual: float = 0.0
    lam: np.ndarray = None


@dataclass
class BalanceWeights:
    """Weights for every period of one target history.

    ``gamma`` has shape (T, n); row ``t-1`` holds the period-``t`` weights.
    ``gaps[t-1]`` are the signed moment gaps of each history column and
    ``bounds[t-1]`` the slacks they were held to.
    """

    gamma: np.ndarray
    target: tuple
    feasible: list
    achieved_imbalance: list
    caps: list
    gaps: list = field(default_factory=list)
    bounds: list = field(default_factory=list)
    col_names: list = field(default_factory=list)
    config: BalanceConfig = None

    @property
    def T(self):
        return self.gamma.shape[0]

    def check(self, data, tol=INVARIANT_TOL):
        """Assert the weight invariants; raises AssertionError on failure."""
        for t in range(1, self.T + 1):
            g = self.gamma[t - 1]
            on = match_mask(data, self.target[:t])
            assert abs(g.sum() - 1.0) <= 1e-8, "weights must sum to one"
            assert g.min() >= -tol, "weights must be nonnegative"
            assert np.all(g[~on] == 0.0), "off-path weights must be zero"
            assert g.max() <= self.caps[t - 1] + tol, "weight cap violated"
            if self.bounds:
                assert np.all(np.abs(self.gaps[t - 1]) <= self.bounds[t - 1] + FEAS_TOL)


def _as_matrix(H):
    if isinstance(H, HistoryMatrix):
        return H.values
    return np.asarray(H, dtype=float)


def solve_weights_step(
    H, prev, mask, delta, cap, qp_tol=1e-8, max_iter=20_000, lam0=None, check_only=False
):
    """Minimum-norm weights for one period.

    Parameters
    ----------
    H : HistoryMatrix or (n, k) array
    prev : (n,) weights of the previous period, summing to one
    mask : (n,) boolean, units allowed positive weight
    delta : scalar or (k,) slack per column; ``inf`` drops a column
    cap : upper bound on each weight, floored at ``1 / mask.sum()``
    check_only : only decide feasibility (one LP); the returned weights are
        then some feasible point rather than the minimum-norm one

    Returns
    -------
    StepResult
        ``feasible`` is False when no point meets the constraints; the
        weights are then the least-infeasible point and
        ``achieved_imbalance`` the smallest attainable excess over ``delta``.

    Raises
    ------
    Infeasible
        If ``mask`` selects no unit.
    """
    X = _as_matrix(H)
    n, k = X.shape
    prev = np.asarray(prev, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if prev.shape != (n,) or mask.shape != (n,):
        raise ValueError("prev and mask must have one entry per unit")
    nm = int(mask.sum())
    if nm == 0:
        raise Infeasible("no eligible unit for the balancing step")
    if abs(prev.sum() - 1.0) > 1e-8:
        raise ValueError("previous weights must sum to one")
    target = prev @ X
    if not np.all(np.isfinite(target)):
        raise ValueError("non-finite balancing target")
    delta = np.broadcast_to(np.asarray(delta, dtype=float), (k,)).astype(float)
    cap = max(float(cap), 1.0 / nm)
    A = X[mask]
    # columns constant on the eligible units are balanced by any weights
    # summing to one; they either hold automatically or cannot hold at all
    spread = A.max(axis=0) - A.min(axis=0)
    const = spread <= 1e-12 * np.maximum(1.0, np.abs(A).max(axis=0))
    const_gap = np.where(const, A[0] - target, 0.0)
    if np.any(np.abs(const_gap[const]) > delta[const] + FEAS_TOL):
        excess = float(np.max(np.abs(const_gap[const]) - delta[const]))
        g = np.zeros(n)
        g[mask] = 1.0 / nm
        gaps = g @ X - target
        return StepResult(g, False, gaps, delta, excess, cap)
    active = ~const & np.isfinite(delta)
    if check_only:
        s_opt, g_lp = least_infeasible(A[:, active], target[active], delta[active], cap)
        g = np.zeros(n)
        g[mask] = g_lp
        gaps = g @ X - target
        ok = s_opt <= FEAS_TOL
        return StepResult(g, ok, gaps, delta, float(max(s_opt, 0.0)) if not ok else 0.0, cap)
    res = solve_balance_qp(
        A[:, active],
        target[active],
        delta[active],
        cap,
        tol=qp_tol,
        max_iter=max_iter,
        lam0=None if lam0 is None else lam0[active],
    )
    g = np.zeros(n)
    g[mask] = res.gamma
    gaps = g @ X - target
    lam = np.zeros(k)
    if res.lam is not None:
        lam[active] = res.lam
    if res.feasible:
        achieved = float(np.max(np.abs(gaps), initial=0.0))
    else:
        achieved = float(res.max_violation)
    return StepResult(g, res.feasible, gaps, delta, achieved, cap, res.kkt_residual, lam)


def _stratum(data, d, t):
    on = match_mask(data, d[:t])
    if not on.any():
        raise EmptyStratum(d[:t])
    return on


def solve_weight_sequence(data, d, cfg=None):
    """Solve the balancing program period by period for history ``d``.

    Raises
    ------
    EmptyStratum
        No unit follows a prefix of ``d``.
    Infeasible
        Some period has no feasible point (``period`` is set, 1-based).
    """
    d = treatment_history(d)
    T = len(d)
    cfg = cfg or BalanceConfig.default(data, T)
    if len(cfg.delta) < T:
        raise ValueError("config covers fewer periods than the history")
    n = data.n
    for t in range(1, T + 1):
        _stratum(data, d, t)
    prev = np.full(n, 1.0 / n)
    out = _new_weights(d, n, cfg)
    for t in range(1, T + 1):
        H = build_history(data, t, cfg.intercept, cfg.interactions)
        on = match_mask(data, d[:t])
        step = solve_weights_step(
            H,
            prev,
            on,
            cfg.effective_delta(t, H.width),
            cfg.effective_cap(n, t),
            cfg.qp_tol,
            cfg.max_iter,
        )
        if not step.feasible:
            exc = Infeasible(
                f"balancing program infeasible at period {t}",
                period=t,
                achieved_imbalance=step.achieved_imbalance,
            )
            raise _with_table(exc, step, H)
        _record(out, t, step, H)
        prev = step.gamma
    return out


def _with_table(exc, step, H):
    """Attach the least-infeasible gap table to an infeasibility error."""
    exc.table = [
        {"period": exc.period, "column": name, "gap": float(g), "bound": float(b)}
        for name, g, b in zip(H.col_names, step.gaps, step.bound)
    ]
    return exc


def _new_weights(d, n, cfg):
    T = len(d)
    return BalanceWeights(
        gamma=np.zeros((T, n)),
        target=d,
        feasible=[False] * T,
        achieved_imbalance=[np.nan] * T,
        caps=[np.nan] * T,
        gaps=[None] * T,
        bounds=[None] * T,
        col_names=[None] * T,
        config=cfg,
    )


def _record(out, t, step, H):
    out.gamma[t - 1] = step.gamma
    out.feasible[t - 1] = step.feasible
    out.achieved_imbalance[t - 1] = step.achieved_imbalance
    out.caps[t - 1] = step.cap
    out.gaps[t - 1] = step.gaps
    out.bounds[t - 1] = step.bound
    out.col_names[t - 1] = H.col_names


def construct_sipw_weights(prev, propensity, indicator):
    """Stabilized inverse-probability update of the previous weights.

    ``w_i = prev_i * 1{D_it = d_t} / P_it``, normalised to sum to one.
    """
    prev = np.asarray(prev, dtype=float)
    prop = np.asarray(propensity, dtype=float)
    ind = np.asarray(indicator, dtype=float)
    if np.any((prop <= 0) | (prop >= 1)):
        raise ValueError("propensities must lie strictly between 0 and 1")
    raw = prev * ind / prop
    total = raw.sum()
    if not total > 0:
        raise ZeroDenominator("no on-path unit carries weight")
    return raw / total


def step_constraints_hold(H, prev, mask, gamma, delta, cap, tol=FEAS_TOL):
    """Whether ``gamma`` satisfies every constraint of the balancing step."""
    X = _as_matrix(H)
    gamma = np.asarray(gamma, dtype=float)
    cap = max(float(cap), 1.0 / max(int(np.sum(mask)), 1))
    gaps = gamma @ X - np.asarray(prev, dtype=float) @ X
    delta = np.broadcast_to(np.asarray(delta, dtype=float), gaps.shape)
    return bool(
        abs(gamma.sum() - 1.0) <= tol
        and gamma.min() >= -INVARIANT_TOL
        and np.all(gamma[~np.asarray(mask, bool)] == 0)
        and gamma.max() <= cap + INVARIANT_TOL
        and np.all(np.abs(gaps) <= delta + tol)
    )


# ---------------------------------------------------------------------------
# tuning


@dataclass
class TuningGrid:
    """Multiplier grid for the slack search.

    ``lower``/``upper`` bound the multipliers of the base slack, per period
    (``lower=None`` uses :func:`default_lower`). The range is split into
    ``R`` consecutive grids of ``G`` equally spaced values each.
    """

    lower: list = None
    upper: list = None
    G: int = 10
    R: int = 3
    lower_scale: float = 0.03

    def grids(self, L, U):
        if not 0 < L < U:
            raise ValueError("grid endpoints must satisfy 0 < L < U")
        edges = np.linspace(L, U, self.R + 1)
        return [np.linspace(edges[r], edges[r + 1], self.G) for r in range(self.R)]


def default_lower(n, p, scale=0.03):
    """Lower grid multiplier tied to the ``log^{3/2}(np)/sqrt(n)`` rate.

    Returned as a multiple of :func:`base_delta` so that the smallest slack
    tried is ``scale * log(np)^{3/2} / sqrt(n)``.
    """
    return scale * math.log(n * p) ** 1.5 / math.sqrt(n) / base_delta(n, p)


@dataclass
class TuningTrace:
    period: int
    K_a: float
    K_b: float
    n_s1: int
    checks: int


def _split_columns(coef, width):
    """Indices of the prioritised columns: nonzero coefficients, at most a third."""
    coef = np.asarray(coef, dtype=float)[:width]
    s1 = np.flatnonzero(coef != 0)
    limit = width // 3
    if s1.size > width / 3:
        order = np.argsort(-np.abs(coef[s1]), kind="stable")
        s1 = np.sort(s1[order[:limit]])
    is_s1 = np.zeros(width, dtype=bool)
    is_s1[s1] = True
    return is_s1


def tune_constraints(data, d, coef_path, base=None, grid=None, cap=None, qp_tol=1e-8, max_iter=20_000):
    """Grid search for the balance slacks, period by period.

    At each period the history columns with nonzero coefficient in
    ``coef_path`` (at most a third of them, largest first) get slack
    ``K_a * base_t`` and the rest ``K_b * base_t``. Pairs are scanned grid by
    grid, ``K_a`` in the outer loop and ``K_b`` in the inner loop, both
    ascending, and the first feasible pair is kept. Feasibility is monotone
    in both multipliers, so the scan is carried out by bisection.

    Returns
    -------
    (BalanceConfig, BalanceWeights, list of TuningTrace)

    Raises
    ------
    NoFeasiblePoint
        Every pair of some period is infeasible. ``config`` holds the least
        infeasible setting tried and ``achieved_imbalance`` its excess.
    """
    d = treatment_history(d)
    T = len(d)
    grid = grid or TuningGrid()
    n = data.n
    for t in range(1, T + 1):
        _stratum(data, d, t)
    Hs = [build_history(data, t) for t in range(1, T + 1)]
    bases = [base_delta(n, H.width) if base is None else base[t - 1] for t, H in enumerate(Hs, 1)]
    caps = [default_cap(n, t) if cap is None else cap[t - 1] for t in range(1, T + 1)]
    deltas, traces = [], []
    prev = np.full(n, 1.0 / n)
    out = None
    cfg = BalanceConfig(delta=[1.0] * T, cap=caps, qp_tol=qp_tol, max_iter=max_iter)
    out = _new_weights(d, n, cfg)
    for t in range(1, T + 1):
        H = Hs[t - 1]
        on = match_mask(data, d[:t])
        is_s1 = _split_columns(coef_path.history_coef(t), H.width)
        L = grid.lower[t - 1] if grid.lower else default_lower(n, H.width, grid.lower_scale)
        U = grid.upper[t - 1] if grid.upper else max(1.0, 2 * L)
        grids = grid.grids(L, U)
        checks = [0]
        cache = {}

        def attempt(ka, kb, full=False):
            key = (ka, kb, full)
            if key not in cache:
                checks[0] += 1
                dl = np.where(is_s1, ka, kb) * bases[t - 1]
                cache[key] = solve_weights_step(
                    H, prev, on, dl, caps[t - 1], qp_tol, max_iter, check_only=not full
                )
            return cache[key]

        def feasible(ka, kb):
            return attempt(ka, kb).feasible

        chosen = _scan(grids, feasible, bool(is_s1.any()))
        if chosen is None:
            top = grids[-1][-1]
            worst = attempt(top, top)
            cfg_fail = BalanceConfig(
                delta=deltas + [np.full(H.width, top * bases[t - 1])] + [1.0] * (T - t),
                cap=caps,
            )
            exc = NoFeasiblePoint(
                f"no feasible slack in the tuning grid at period {t}",
                period=t,
                achieved_imbalance=worst.achieved_imbalance,
                config=cfg_fail,
            )
            raise _with_table(exc, worst, H)
        ka, kb = chosen
        step = attempt(ka, kb, full=True)
        if not step.feasible:
            # the LP accepted a point within solver tolerance that the QP
            # cannot certify; continue along the scan order
            ka, kb, step = _advance(grids, ka, kb, attempt)
        deltas.append(np.where(is_s1, ka, kb) * bases[t - 1])
        traces.append(TuningTrace(t, float(ka), float(kb), int(is_s1.sum()), checks[0]))
        _record(out, t, step, H)
        prev = step.gamma
    cfg = replace(cfg, delta=deltas)
    out.config = cfg
    return cfg, out, traces


def _first_true(values, pred):
    """Smallest index with ``pred`` true for a monotone predicate, else None."""
    lo, hi = 0, len(values) - 1
    if not pred(values[hi]):
        return None
    while lo < hi:
        mid = (lo + hi) // 2
        if pred(values[mid]):
            hi = mid
        else:
            lo = mid + 1
    return lo


def _scan(grids, feasible, split):
    """First feasible (K_a, K_b) in scan order, using monotonicity."""
    for g in grids:
        top = g[-1]
        if not feasible(top, top):
            continue
        if not split:
            i = _first_true(g, lambda k: feasible(k, k))
            return g[i], g[i]
        ia = _first_true(g, lambda k: feasible(k, top))
        ka = g[ia]
        ib = _first_true(g, lambda k: feasible(ka, k))
        return ka, g[ib]
    return None


def _advance(grids, ka, kb, attempt):
    """Walk forward in scan order from (ka, kb) to the next certified point."""
    started = False
    for g in grids:
        for a in g:
            for b in g:
                if not started:
                    started = a == ka and b == kb
                    continue
                step = attempt(a, b, full=True)
                if step.feasible:
                    return a, b, step
    raise NoFeasiblePoint("tuning grid exhausted", achieved_imbalance=None)


# ---------------------------------------------------------------------------
# diagnostics


def imbalance_report(weights, data, path=None):
    """Signed moment gaps per period and history column.

    Returns a list of dict rows ``(period, column, gap, bound)``; writes
    them as CSV when ``path`` is given.
    """
    rows = []
    prev = np.full(data.n, 1.0 / data.n)
    cfg = weights.config
    for t in range(1, weights.T + 1):
        H = build_history(
            data, t, cfg.intercept if cfg else True, cfg.interactions if cfg else False
        )
        g = weights.gamma[t - 1]
        gaps = g @ H.values - prev @ H.values
        bound = (
            weights.bounds[t - 1]
            if weights.bounds and weights.bounds[t - 1] is not None
            else np.full(H.width, np.nan)
        )
        for j, name in enumerate(H.col_names):
            rows.append(
                {"period": t, "column": name, "gap": float(gaps[j]), "bound": float(bound[j])}
            )
        prev = g
    if path is not None:
        write_rows(rows, path, ["period", "column", "gap", "bound"])
    return rows


def uniform_weights(data, d):
    """Stratum-uniform weights, the unbalanced baseline for diagnostics."""
    d = treatment_history(d)
    out = _new_weights(d, data.n, None)
    for t in range(1, len(d) + 1):
        on = _stratum(data, d, t)
        out.gamma[t - 1] = on / on.sum()
        out.feasible[t - 1] = True
        out.caps[t - 1] = 1.0 / on.sum()
    out.bounds = []
    return out


def write_rows(rows, path, fields):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
