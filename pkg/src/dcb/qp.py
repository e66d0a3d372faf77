"""Minimum-norm balancing program and its building blocks.

The program solved here is::

    min 0.5 * ||g||^2   s.t.   sum(g) = 1,  0 <= g <= u,  |A'g - m| <= delta

``A`` has one row per eligible unit and one column per balanced moment.
The dual in the balance multipliers ``lam`` is maximised with FISTA; the
primal point attached to a dual point is ``proj_C(-A lam)`` where ``C`` is
the capped simplex. An active-set step then solves the KKT system exactly
for the constraints the first-order phase identified.
"""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

FEAS_TOL = 1e-8


def project_capped_simplex(v, u):
    """Euclidean projection of ``v`` onto ``{g : sum(g) = 1, 0 <= g <= u}``.

    The solution is ``clip(v - nu, 0, u)``; ``nu`` is found exactly by a scan
    over the sorted breakpoints of the piecewise-linear map
    ``nu -> sum(clip(v - nu, 0, u))``. Requires ``sum(u) >= 1``.

    Returns the projection and ``nu``.
    """
    v = np.asarray(v, dtype=float)
    u = np.broadcast_to(np.asarray(u, dtype=float), v.shape)
    total = u.sum()
    if total < 1.0 - 1e-12:
        raise ValueError("caps sum to less than one; the set is empty")
    lo, hi = v - u, v
    pts = np.concatenate([lo, hi])
    # slope change when nu crosses a breakpoint: -1 entering, +1 leaving
    dslope = np.concatenate([-np.ones_like(lo), np.ones_like(hi)])
    order = np.argsort(pts, kind="stable")
    pts, dslope = pts[order], dslope[order]
    slope = np.cumsum(dslope)  # slope on (pts[k], pts[k+1])
    vals = np.empty_like(pts)
    vals[0] = total
    vals[1:] = total + np.cumsum(slope[:-1] * np.diff(pts))
    # vals is non-increasing; find the first breakpoint where it drops to <= 1
    k = int(np.searchsorted(-vals, -1.0, side="left"))
    if k == 0:
        nu = pts[0]
    elif k >= pts.size:
        nu = pts[-1]
    else:
        s = slope[k - 1]
        nu = pts[k - 1] + (1.0 - vals[k - 1]) / s if s != 0 else pts[k]
    g = np.clip(v - nu, 0.0, u)
    # one Newton correction on the free set removes rounding drift
    free = (g > 0) & (g < u)
    if free.any():
        nu += (g.sum() - 1.0) / free.sum()
        g = np.clip(v - nu, 0.0, u)
    return g, nu


@dataclass
class QPResult:
    gamma: np.ndarray
    feasible: bool
    max_violation: float
    kkt_residual: float
    iterations: int
    polished: bool
    lam: np.ndarray = None


def least_infeasible(A, m, delta, u):
    """Solve ``min s`` s.t. ``|A'g - m| <= delta + s``, ``g`` in the capped simplex.

    Returns ``(s, g)``; the program is feasible iff ``s <= 0`` (up to solver
    tolerance). ``s`` may be negative when every constraint has slack.
    """
    nm, k = A.shape
    if k == 0:
        g, _ = project_capped_simplex(np.full(nm, 1.0 / nm), u)
        return -np.inf, g
    c = np.zeros(nm + 1)
    c[-1] = 1.0
    ones = np.ones((k, 1))
    A_ub = np.vstack([np.hstack([A.T, -ones]), np.hstack([-A.T, -ones])])
    b_ub = np.concatenate([m + delta, delta - m])
    A_eq = np.concatenate([np.ones(nm), [0.0]])[None, :]
    ub = np.broadcast_to(u, (nm,))
    bounds = [(0.0, float(x)) for x in ub] + [(-np.max(delta), None)]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    g = np.clip(res.x[:nm], 0.0, ub)
    g /= g.sum()
    return float(res.x[-1]), g


def _violation(A, m, delta, g):
    return float(np.max(np.abs(A.T @ g - m) - delta, initial=-np.inf))


def _kkt_residual(A, m, delta, u, g, lam):
    """Largest violation of the KKT conditions at (g, lam)."""
    gap = A.T @ g - m
    primal = max(0.0, float(np.max(np.abs(gap) - delta, initial=0.0)))
    gp, _ = project_capped_simplex(-A @ lam, u)
    station = float(np.max(np.abs(gp - g)))
    # complementarity: lam_j > 0 only on the upper face, < 0 only on the lower face
    comp = float(np.max(np.abs(lam) * np.maximum(0.0, delta - np.sign(lam) * gap), initial=0.0))
    return max(primal, station, comp)


def _fista(At, mt, u, lam, max_iter, tol):
    """Dual FISTA on the scaled problem (all slacks equal to one)."""
    L = np.linalg.norm(At, 2) ** 2
    if L == 0:
        L = 1.0
    step = 1.0 / L
    z = lam.copy()
    tk = 1.0
    it = 0
    g = None
    for it in range(1, max_iter + 1):
        g, _ = project_capped_simplex(-At @ z, u)
        grad = At.T @ g - mt
        new = z + step * grad
        new = np.sign(new) * np.maximum(np.abs(new) - step, 0.0)
        t_next = 0.5 * (1 + np.sqrt(1 + 4 * tk * tk))
        mom = (tk - 1) / t_next
        # restart when the momentum points against progress
        if np.dot(new - lam, z - new) > 0:
            t_next, mom = 1.0, 0.0
        z = new + mom * (new - lam)
        if np.max(np.abs(new - lam), initial=0.0) < tol and it > 10:
            lam = new
            break
        lam, tk = new, t_next
    g, _ = project_capped_simplex(-At @ lam, u)
    return lam, g, it


def _solve_fixed(At, mt, u, J, s, lam0, max_steps=50):
    """Solve ``At_J' proj(-At_J lam_J) = mt_J + s_J`` by piecewise-linear Newton."""
    AJ = At[:, J]
    rhs = mt[J] + s
    lamJ = lam0.copy()
    prev_sets = None
    for _ in range(max_steps):
        g, nu = project_capped_simplex(-AJ @ lamJ, u) if J.size else project_capped_simplex(
            np.zeros(At.shape[0]), u
        )
        if J.size == 0:
            return lamJ, g, True
        free = (g > 0) & (g < u)
        top = g >= u
        sets = (free.tobytes(), top.tobytes())
        if sets == prev_sets:
            return lamJ, g, True
        prev_sets = sets
        nf = int(free.sum())
        if nf == 0:
            return lamJ, g, False
        AF = AJ[free]
        cF = AF.mean(axis=0)
        AFc = AF - cF
        M = AFc.T @ AFc  # A_F' (I - 11'/|F|) A_F
        ucap = np.broadcast_to(u, g.shape)
        base_w = (1.0 - ucap[top].sum()) / nf
        const = AF.sum(axis=0) * base_w + AJ[top].T @ ucap[top]
        lamJ = np.linalg.lstsq(-M, rhs - const, rcond=None)[0]
    g, _ = project_capped_simplex(-AJ @ lamJ, u)
    return lamJ, g, False


def _polish(At, mt, u, lam, gap, max_rounds=60):
    """Active-set refinement from a dual estimate. Returns (lam, g) or None."""
    k = At.shape[1]
    J = np.flatnonzero((np.abs(lam) > 1e-12) | (np.abs(gap) > 1 - 1e-6))
    s = np.where(lam[J] != 0, np.sign(lam[J]), np.sign(gap[J]))
    s[s == 0] = 1.0
    lam_full = np.zeros(k)
    for _ in range(max_rounds):
        lamJ, g, ok = _solve_fixed(At, mt, u, J, s, lam[J] if J.size else np.zeros(0))
        if not ok:
            return None
        # dual sign check
        wrong = lamJ * s < -1e-12
        if wrong.any():
            drop = int(np.argmin(lamJ * s))
            keep = np.ones(J.size, bool)
            keep[drop] = False
            J, s = J[keep], s[keep]
            lam = np.zeros(k)
            lam[J] = lamJ[keep]
            continue
        gfull = At.T @ g - mt
        excess = np.abs(gfull) - 1.0
        excess[J] = -np.inf
        worst = int(np.argmax(excess)) if k else 0
        if k and excess[worst] > 1e-10:
            J = np.append(J, worst)
            s = np.append(s, np.sign(gfull[worst]))
            lam = np.zeros(k)
            lam[J[:-1]] = lamJ
            continue
        lam_full[:] = 0.0
        lam_full[J] = lamJ
        return lam_full, g
    return None


def solve_balance_qp(A, m, delta, u, tol=1e-8, max_iter=20_000, lam0=None):
    """Solve the minimum-norm balancing program.

    Parameters
    ----------
    A : (n_eligible, k) moments of the eligible units
    m : (k,) target moments
    delta : (k,) positive slacks (``inf`` removes a constraint)
    u : scalar or (n_eligible,) weight caps with ``sum(u) >= 1``
    tol : KKT tolerance
    max_iter : FISTA iteration cap
    lam0 : optional warm start for the balance multipliers

    Returns
    -------
    QPResult
        When the program is infeasible, ``gamma`` is the least-infeasible
        point of the LP relaxation and ``feasible`` is False.
    """
    A = np.asarray(A, dtype=float)
    m = np.asarray(m, dtype=float)
    delta = np.broadcast_to(np.asarray(delta, dtype=float), m.shape).copy()
    nm = A.shape[0]
    u = np.broadcast_to(np.asarray(u, dtype=float), (nm,)).copy()
    keep = np.isfinite(delta)
    A, m, delta = A[:, keep], m[keep], delta[keep]

    g0, _ = project_capped_simplex(np.zeros(nm), u)
    if A.shape[1] == 0 or _violation(A, m, delta, g0) <= 0:
        lam = np.zeros(A.shape[1])
        return QPResult(g0, True, max(0.0, _violation(A, m, delta, g0)), 0.0, 0, True, lam)

    s_opt, g_lp = least_infeasible(A, m, delta, u)
    if s_opt > FEAS_TOL:
        v = _violation(A, m, delta, g_lp)
        return QPResult(g_lp, False, max(v, s_opt), np.inf, 0, False, None)

    At = A / delta
    mt = m / delta
    lam = np.zeros(A.shape[1]) if lam0 is None else np.asarray(lam0, dtype=float)[keep] * delta
    lam, g, it = _fista(At, mt, u, lam, max_iter, tol * 1e-2)
    gap = At.T @ g - mt
    pol = _polish(At, mt, u, lam, gap)
    polished = pol is not None
    if polished:
        lam_p, g_p = pol
        if _violation(A, m, delta, g_p) <= FEAS_TOL:
            lam, g = lam_p, g_p
        else:
            polished = False
    if not polished and _violation(A, m, delta, g) > FEAS_TOL:
        # first-order point is not accurate enough; fall back to the LP vertex
        # pulled toward the FISTA point while staying feasible
        g = _blend_feasible(A, m, delta, g, g_lp)
    lam_orig = lam / delta
    viol = max(0.0, _violation(A, m, delta, g))
    kkt = _kkt_residual(A, m, delta, u, g, lam_orig)
    lam_out = np.zeros(keep.size)
    lam_out[keep] = lam_orig
    return QPResult(g, viol <= FEAS_TOL, viol, kkt, it, polished, lam_out)


def _blend_feasible(A, m, delta, g, g_feas):
    """Largest step from ``g_feas`` toward ``g`` keeping every constraint."""
    lo, hi = 0.0, 1.0
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _violation(A, m, delta, g_feas + mid * (g - g_feas)) <= 0:
            lo = mid
        else:
            hi = mid
    return g_feas + lo * (g - g_feas)
