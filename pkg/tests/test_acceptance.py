"""End-to-end acceptance checks.

Each test tags itself with ``record_property("acceptance", k)`` and a short
detail string; ``conftest.py`` prints one pass/fail line per criterion at
the end of the session. The Monte Carlo criteria run the full replicate
counts and take roughly half an hour on a single core.
"""

import math
import time
import warnings

import numpy as np
import pytest

from dcb.balancer import (
    TuningGrid,
    construct_sipw_weights,
    solve_weights_step,
    step_constraints_hold,
    tune_constraints,
)
from dcb.cli import main as cli_main
from dcb.estimator import assemble_estimate, chi_quantile
from dcb.panel import build_history, match_mask
from dcb.qp import project_capped_simplex, solve_balance_qp
from dcb.regression import fit_coefficient_path, lasso_fit
from dcb.simulation import SimConfig, generate_dataset, propensity_summary, run_replicates, summarize

from oracles import qp_face_oracle
from test_estimator import decomposition, random_parts


def tag(record_property, k, detail):
    record_property("acceptance", k)
    record_property("detail", detail)


def mse_table(cfg, methods, replicates):
    recs = run_replicates(cfg, methods, replicates)
    return summarize(recs, methods, "contrast", cfg).methods


# ---------------------------------------------------------------------------
# 1-3: numerical building blocks


def test_acc01_weight_validity(record_property):
    rng = np.random.default_rng(101)
    t0 = time.time()
    worst = 0.0
    for _ in range(100):
        n, k = rng.integers(20, 120), rng.integers(1, 8)
        H = rng.standard_normal((n, k))
        mask = rng.random(n) < 0.6
        mask[:2] = True
        prev = rng.dirichlet(np.ones(n))
        cap = min(1.0, rng.uniform(2.0, 6.0) / mask.sum())
        # any capped point on the mask certifies feasibility of a slack
        g0, _ = project_capped_simplex(rng.dirichlet(np.ones(mask.sum())), cap)
        delta = np.abs(g0 @ H[mask] - prev @ H) + rng.uniform(0.0, 0.05, k)
        res = solve_weights_step(H, prev, mask, delta, cap)
        g = res.gamma
        assert res.feasible
        assert abs(g.sum() - 1) <= 1e-8
        assert g.min() >= -1e-10
        assert np.all(g[~mask] == 0)
        assert g.max() <= cap + 1e-10
        excess = np.max(np.abs(g @ H - prev @ H) - delta)
        assert excess <= 1e-8
        worst = max(worst, excess)
    elapsed = time.time() - t0
    tag(record_property, 1, f"100 instances, max band excess {worst:.1e}, {elapsed:.1f}s")
    assert elapsed < 60


def test_acc02_qp_oracle(record_property):
    rng = np.random.default_rng(202)
    t0 = time.time()
    worst, count = 0.0, 0
    while count < 50:
        n, k = rng.integers(2, 7), rng.integers(1, 3)
        A = rng.standard_normal((n, k))
        u = min(1.0, rng.uniform(1.0, 3.0) / n)
        g0, _ = project_capped_simplex(rng.dirichlet(np.ones(n)), u)
        m = A.T @ g0 + 0.1 * rng.uniform(-1, 1, k)
        delta = 0.1 * rng.uniform(0.5, 2.0, k)
        ref, _ = qp_face_oracle(A, m, delta, u)
        if not np.isfinite(ref):
            continue
        res = solve_balance_qp(A, m, delta, u)
        assert res.feasible
        obj = 0.5 * res.gamma @ res.gamma
        worst = max(worst, abs(obj - ref) / ref)
        count += 1
    elapsed = time.time() - t0
    tag(record_property, 2, f"50 instances, max relative gap {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-4 and elapsed < 60


def test_acc03_lasso_oracle(record_property):
    rng = np.random.default_rng(303)
    soft = lambda z, lam: np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)
    worst = 0.0
    for _ in range(20):
        n = rng.integers(20, 80)
        # univariate
        x = rng.standard_normal(n)
        x /= np.sqrt(np.mean(x**2))
        y = rng.normal() * x + rng.standard_normal(n)
        lam = rng.uniform(0.0, 1.0) * abs(x @ y) / n
        fit = lasso_fit(x[:, None], y, lam, tol=1e-13, track_objective=True)
        worst = max(worst, abs(fit.coef[0] - soft(x @ y / n, lam)))
        assert np.all(np.diff(fit.objective_history) <= 1e-12)
        # orthogonal design
        p = rng.integers(2, 6)
        Q, _ = np.linalg.qr(rng.standard_normal((n, p)))
        X = Q * np.sqrt(n)
        y = X @ rng.standard_normal(p) + rng.standard_normal(n)
        lam = rng.uniform(0.05, 1.0)
        fit = lasso_fit(X, y, lam, tol=1e-13, track_objective=True)
        worst = max(worst, np.max(np.abs(fit.coef - soft(X.T @ y / n, lam))))
        assert np.all(np.diff(fit.objective_history) <= 1e-12)
    tag(record_property, 3, f"20 instances, max coefficient error {worst:.1e}")
    assert worst <= 1e-8


# ---------------------------------------------------------------------------
# 4: the stabilised IPW point as a feasible candidate


def test_acc04_sipw_feasibility(record_property):
    cfg = SimConfig(n=400, T=2, p=100, eta=0.1)
    d = (1, 1)
    feasible = 0
    for seed in range(100):
        data, oracle = generate_dataset(cfg, seed)
        path = fit_coefficient_path(data, d)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            _, w, _ = tune_constraints(data, d, path, grid=TuningGrid())
        prev = np.full(data.n, 1.0 / data.n)
        ok = True
        for t in (1, 2):
            H = build_history(data, t).values
            on = match_mask(data, d[:t])
            prob = oracle.assignment_propensity(d)[:, t - 1]
            star = construct_sipw_weights(prev, prob, on)
            hold = step_constraints_hold(H, prev, on, star, w.bounds[t - 1], w.caps[t - 1])
            if hold:
                g = w.gamma[t - 1]
                assert data.n * (g @ g) <= data.n * (star @ star) + 1e-8
            ok &= hold
            prev = w.gamma[t - 1]
        feasible += ok
    tag(record_property, 4, f"SIPW feasible at tuned slack in {feasible}/100 seeds (need >= 90)")
    assert feasible >= 90


# ---------------------------------------------------------------------------
# 5-6: identities


def test_acc05_decomposition(record_property):
    rng = np.random.default_rng(505)
    worst = 0.0
    for i in range(100):
        T = 1 + i % 4
        H, beta, beta_hat, gamma, y = random_parts(rng, T=T)
        fitted = np.column_stack([H[t] @ beta_hat[t] for t in range(T)])
        lhs = assemble_estimate(y, gamma, fitted) - np.mean(H[0] @ beta[0])
        worst = max(worst, abs(lhs - sum(decomposition(H, beta, beta_hat, gamma, y))))
    tag(record_property, 5, f"100 draws, max identity error {worst:.1e}")
    assert worst <= 1e-10


def test_acc06_quantiles(record_property):
    q = math.sqrt(chi_quantile(2, 0.05))
    err = max(abs(chi_quantile(2, a) + 2 * math.log(a)) for a in np.linspace(0.001, 0.5, 50))
    tag(record_property, 6, f"sqrt chi2_2(.05) = {q:.5f}, max |chi2_2(a) + 2 ln a| = {err:.1e}")
    assert abs(q - 2.4477) <= 1e-4 and err <= 1e-9


# ---------------------------------------------------------------------------
# 7-12: Monte Carlo


@pytest.fixture(scope="module")
def table2_full():
    return mse_table(SimConfig(n=400, p=100, T=2, eta=0.1), ["dcb", "aipw_star", "seq", "lasso"], 200)


def test_acc07_mse_reproduction(record_property, table2_full):
    s = table2_full
    dcb, aipw, seq = s["dcb"].mse, s["aipw_star"].mse, s["seq"].mse
    t0 = time.time()
    r = mse_table(SimConfig(n=200, p=50, T=2, eta=0.1), ["dcb", "aipw_star", "seq"], 100)
    reduced_time = time.time() - t0
    rd, ra, rs = r["dcb"].mse, r["aipw_star"].mse, r["seq"].mse
    tag(
        record_property,
        7,
        f"full: DCB {dcb:.4f} aIPW* {aipw:.4f} Seq {seq:.4f}; "
        f"reduced: DCB {rd:.4f} aIPW* {ra:.4f} Seq {rs:.4f} in {reduced_time:.0f}s",
    )
    assert 0.03 <= dcb <= 0.12
    assert dcb <= 1.2 * aipw and dcb < seq
    assert rd <= 1.2 * ra and rd < rs
    assert reduced_time <= 300


def test_table2_competitor_orderings(table2_full):
    s = table2_full
    assert 0.035 <= s["aipw_star"].mse <= 0.14
    assert s["lasso"].mse > s["dcb"].mse
    assert s["seq"].mse >= 3 * s["dcb"].mse


def test_acc08_poor_overlap(record_property):
    s = mse_table(SimConfig(n=200, p=50, T=3, eta=0.5), ["dcb", "aipw_star", "ipwh"], 100)
    dcb, aipw, ipw = s["dcb"].mse, s["aipw_star"].mse, s["ipwh"].mse
    tag(record_property, 8, f"DCB {dcb:.4f} aIPW* {aipw:.4f} IPWh {ipw:.4f}")
    assert dcb < aipw and dcb < ipw


def test_acc09_coverage(record_property):
    cfg = SimConfig(n=400, p=100, T=2, eta=0.5)
    s = summarize(run_replicates(cfg, ["dcb"], 200), ["dcb"], "contrast", cfg).methods["dcb"]
    tag(record_property, 9, f"chi {s.coverage_chi:.3f}, gaussian {s.coverage_gauss:.3f} ({s.failures} failures)")
    assert s.coverage_chi >= 0.93 and s.coverage_gauss <= s.coverage_chi


def test_acc10_propensity_median(record_property):
    q = propensity_summary(SimConfig(n=400, T=2, p=100, eta=0.1), range(50))
    tag(record_property, 10, f"median joint propensity {q['median']:.4f} (reference 0.218)")
    assert abs(q["median"] - 0.218) <= 0.04


def test_acc11_determinism(record_property, tmp_path, capsys):
    cfg = tmp_path / "exp.ini"
    cfg.write_text("n = 120\np = 8\nT = 2\nreplicates = 8\nmethods = dcb, aipw_star, lasso\n")
    outputs = []
    for label, workers in (("a", 1), ("b", 1), ("c", 8)):
        out = tmp_path / label
        argv = ["simulate", "--config", str(cfg), "--seed", "17", "--workers", str(workers), "--quiet", "--out-dir", str(out)]
        assert cli_main(argv) == 0
        outputs.append([(out / f).read_bytes() for f in ("mse.csv", "coverage.csv", "records.json")])
    capsys.readouterr()
    same = outputs[0] == outputs[1] == outputs[2]
    tag(record_property, 11, f"byte-identical across reruns and workers 1/8: {same}")
    assert same


def test_acc12_misspecification(record_property):
    s = mse_table(SimConfig(n=200, p=50, T=2, eta=0.3, misspecified=True), ["dcb", "aipw_star"], 100)
    dcb, aipw = s["dcb"].mse, s["aipw_star"].mse
    tag(record_property, 12, f"DCB {dcb:.4f} aIPW* {aipw:.4f}")
    assert dcb < aipw
