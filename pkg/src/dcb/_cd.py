"""Compiled coordinate-descent kernels (covariance updates)."""

import numba
import numpy as np


@numba.njit(cache=True)
def _soft(z, lam):
    if z > lam:
        return z - lam
    if z < -lam:
        return z + lam
    return 0.0


@numba.njit(cache=True)
def quad_objective(G, c, yy, beta, pen):
    """0.5 * yy - c'b + 0.5 * b'Gb + sum(pen * |b|)."""
    p = beta.shape[0]
    quad = 0.0
    lin = 0.0
    l1 = 0.0
    for j in range(p):
        bj = beta[j]
        if bj == 0.0:
            continue
        lin += c[j] * bj
        l1 += pen[j] * abs(bj)
        s = 0.0
        for k in range(p):
            s += G[j, k] * beta[k]
        quad += bj * s
    return 0.5 * yy - lin + 0.5 * quad + l1


@numba.njit(cache=True)
def cd_gram(G, c, beta, pen, tol, max_iter, yy, track):
    """Cyclic coordinate descent for

        min_b 0.5 * b'Gb - c'b + sum_j pen_j |b_j|

    ``beta`` is updated in place (warm start). Each full sweep is followed by
    sweeps restricted to the active set until those settle; every sweep counts
    as one iteration. Convergence is declared when a full sweep moves no
    coordinate by more than ``tol``.

    Returns (n_iter, converged, objective_history). The history holds the
    objective after every sweep when ``track`` is set, otherwise it is empty.
    """
    p = beta.shape[0]
    grad = c.copy()  # c - G b
    for j in range(p):
        if beta[j] != 0.0:
            for k in range(p):
                grad[k] -= G[k, j] * beta[j]
    hist = np.empty(max_iter + 1 if track else 0)
    if track:
        hist[0] = quad_objective(G, c, yy, beta, pen)
    active = np.zeros(p, dtype=np.bool_)
    it = 0
    converged = False
    while it < max_iter:
        # full sweep
        maxd = 0.0
        for j in range(p):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            old = beta[j]
            new = _soft(grad[j] + gjj * old, pen[j]) / gjj
            if new != old:
                delta = new - old
                beta[j] = new
                for k in range(p):
                    grad[k] -= G[k, j] * delta
                if abs(delta) > maxd:
                    maxd = abs(delta)
            active[j] = new != 0.0
        it += 1
        if track:
            hist[it] = quad_objective(G, c, yy, beta, pen)
        if maxd < tol:
            converged = True
            break
        # active-set sweeps
        while it < max_iter:
            maxd = 0.0
            for j in range(p):
                if not active[j]:
                    continue
                gjj = G[j, j]
                old = beta[j]
                new = _soft(grad[j] + gjj * old, pen[j]) / gjj
                if new != old:
                    delta = new - old
                    beta[j] = new
                    for k in range(p):
                        grad[k] -= G[k, j] * delta
                    if abs(delta) > maxd:
                        maxd = abs(delta)
            it += 1
            if track:
                hist[it] = quad_objective(G, c, yy, beta, pen)
            if maxd < tol:
                break
    if track:
        hist = hist[: it + 1]
    return it, converged, hist


@numba.njit(cache=True)
def cd_path(G, c, pens, tol, max_iter):
    """Warm-started solutions along a sequence of penalty vectors.

    ``pens`` has shape (L, p); returns coefficients of shape (L, p) and a
    flag per step telling whether it converged.
    """
    L = pens.shape[0]
    p = c.shape[0]
    out = np.zeros((L, p))
    ok = np.zeros(L, dtype=np.bool_)
    beta = np.zeros(p)
    for l in range(L):
        _, conv, _ = cd_gram(G, c, beta, pens[l], tol, max_iter, 0.0, False)
        out[l] = beta
        ok[l] = conv
    return out, ok
