import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcb.balancer import (
    BalanceConfig,
    TuningGrid,
    base_delta,
    construct_sipw_weights,
    default_cap,
    imbalance_report,
    solve_weight_sequence,
    solve_weights_step,
    step_constraints_hold,
    tune_constraints,
    uniform_weights,
)
from dcb.errors import EmptyStratum, Infeasible, NoFeasiblePoint, ZeroDenominator
from dcb.panel import PanelDataset, build_history, match_mask
from dcb.qp import solve_balance_qp
from dcb.regression import CoefficientPath, fit_coefficient_path
from dcb.simulation import SimConfig, generate_dataset

from oracles import simplex_grid


def test_infinite_slack_gives_uniform_on_mask():
    rng = np.random.default_rng(0)
    H = rng.standard_normal((10, 3))
    mask = np.arange(10) % 3 == 0
    step = solve_weights_step(H, np.full(10, 0.1), mask, np.inf, 1.0)
    np.testing.assert_allclose(step.gamma[mask], 1 / mask.sum(), atol=1e-12)
    assert np.all(step.gamma[~mask] == 0)


def test_toy_step_matches_grid():
    H = np.arange(4.0)[:, None]
    step = solve_weights_step(H, np.full(4, 0.25), np.ones(4, bool), 0.01, 1.0)
    pts = simplex_grid(4, 120)
    ok = np.abs(pts[:, 1] + 2 * pts[:, 2] + 3 * pts[:, 3] - 1.5) <= 0.01
    assert step.feasible
    assert step.gamma @ step.gamma == pytest.approx(np.min(np.sum(pts[ok] ** 2, axis=1)), abs=2e-3)


def test_empty_mask_raises():
    with pytest.raises(Infeasible):
        solve_weights_step(np.ones((3, 1)), np.full(3, 1 / 3), np.zeros(3, bool), 0.1, 1.0)


def test_constant_column_infeasible_is_reported():
    # a past-treatment column equal to 1 on the stratum cannot match a target of 0.5
    H = np.column_stack([np.array([1.0, 1.0, 0.0, 0.0]), np.arange(4.0)])
    mask = np.array([True, True, False, False])
    step = solve_weights_step(H, np.full(4, 0.25), mask, 0.1, 1.0)
    assert not step.feasible and step.achieved_imbalance == pytest.approx(0.4)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(8, 80), k=st.integers(1, 10))
def test_step_invariants(seed, n, k):
    rng = np.random.default_rng(seed)
    H = rng.standard_normal((n, k))
    mask = rng.random(n) < 0.6
    mask[0] = True
    prev = rng.dirichlet(np.ones(n))
    cap = rng.uniform(1.0 / mask.sum(), 1.0)
    delta = rng.uniform(0.05, 2.0, k)
    step = solve_weights_step(H, prev, mask, delta, cap)
    if not step.feasible:
        return
    g = step.gamma
    assert abs(g.sum() - 1) <= 1e-8 and g.min() >= -1e-10
    assert np.all(g[~mask] == 0) and g.max() <= cap + 1e-10
    assert np.all(np.abs(g @ H - prev @ H) <= delta + 1e-8)
    assert step_constraints_hold(H, prev, mask, g, delta, cap)


def test_one_period_reduces_to_static_balancing(small_sim):
    data, _ = small_sim
    d1 = data.truncate(1)
    cfg = BalanceConfig(delta=[0.3])
    w = solve_weight_sequence(d1, (1,), cfg)
    H = build_history(d1, 1).values
    on = d1.d[:, 0] == 1
    cap = max(default_cap(d1.n, 1), 1 / on.sum())
    # drop the intercept, which any weights summing to one balance
    ref = solve_balance_qp(H[on][:, :-1], H[:, :-1].mean(axis=0), np.full(H.shape[1] - 1, 0.3), cap)
    np.testing.assert_allclose(w.gamma[0][on], ref.gamma, atol=1e-7)


def test_sequence_invariants_and_telescoping(small_sim3):
    data, _ = small_sim3
    cfg = BalanceConfig(delta=[0.4, 0.6, 0.8])
    w = solve_weight_sequence(data, (1, 0, 1), cfg)
    w.check(data)
    prev = np.full(data.n, 1 / data.n)
    for t in range(1, 4):
        H = build_history(data, t).values
        assert np.all(np.abs(w.gamma[t - 1] @ H - prev @ H) <= cfg.delta[t - 1] + 1e-8)
        prev = w.gamma[t - 1]


def test_sequence_errors(small_sim):
    data, _ = small_sim
    d = np.array(data.d)
    d[:, 1] = 0
    flat = PanelDataset(data.x, d, data.y)
    with pytest.raises(EmptyStratum):
        solve_weight_sequence(flat, (1, 1))
    few = PanelDataset(data.x[:40], data.d[:40], data.y[:40])
    with pytest.raises(Infeasible) as info:
        solve_weight_sequence(few, (1, 1), BalanceConfig(delta=[1e-9, 1e-9]))
    assert info.value.period in (1, 2) and info.value.table


def test_sipw_construction():
    on = np.arange(10) % 2 == 0
    w = construct_sipw_weights(np.full(10, 0.1), np.full(10, 0.5), on)
    np.testing.assert_allclose(w[on], 0.2)
    assert w.sum() == 1.0 or abs(w.sum() - 1) < 1e-15
    with pytest.raises(ZeroDenominator):
        construct_sipw_weights(np.full(10, 0.1), np.full(10, 0.5), np.zeros(10))


def test_sipw_norm_domination():
    cfg = SimConfig(n=400, T=2, p=20, eta=0.1)
    hits = 0
    for seed in range(5):
        data, oracle = generate_dataset(cfg, seed)
        d = (1, 1)
        bc = BalanceConfig(delta=[base_delta(400, build_history(data, t).width) * 0.3 for t in (1, 2)])
        w = solve_weight_sequence(data, d, bc)
        prev = np.full(data.n, 1 / data.n)
        for t in (1, 2):
            H = build_history(data, t).values
            on = match_mask(data, d[:t])
            star = construct_sipw_weights(prev, oracle.assignment_propensity(d)[:, t - 1], on)
            if step_constraints_hold(H, prev, on, star, w.bounds[t - 1], w.caps[t - 1]):
                hits += 1
                assert data.n * w.gamma[t - 1] @ w.gamma[t - 1] <= data.n * star @ star + 1e-8
            prev = w.gamma[t - 1]
    assert hits > 0


# ---------------------------------------------------------------------------
# tuning


def _one_period_toy():
    x = np.array([0.0, 0.0, 1.0, 1.0])[:, None, None]
    d = np.array([[0], [0], [1], [1]])
    data = PanelDataset(x, d, np.zeros((4, 1)))
    path = CoefficientPath((1,), "linear", [np.zeros(3)], np.zeros((4, 1)), [0.0], [("x1_t1", "intercept", "d1")], [np.arange(2)])
    return data, path


def test_tuning_returns_first_feasible_multiplier():
    data, path = _one_period_toy()
    # the treated mean is 1 and the target 0.5: feasible iff K * 0.3 >= 0.5
    grid = TuningGrid(lower=[1.0], upper=[3.0], G=3, R=1)
    cfg, w, traces = tune_constraints(data, (1,), path, base=[0.3], grid=grid)
    assert traces[0].K_a == traces[0].K_b == 2.0
    np.testing.assert_allclose(cfg.delta[0], 0.6)
    assert traces[0].n_s1 == 0


def test_tuning_grid_exhausted():
    data, path = _one_period_toy()
    grid = TuningGrid(lower=[0.1], upper=[0.5], G=3, R=2)
    with pytest.raises(NoFeasiblePoint) as info:
        tune_constraints(data, (1,), path, base=[0.3], grid=grid)
    exc = info.value
    assert exc.achieved_imbalance == pytest.approx(0.5 - 0.15, abs=1e-7)
    assert exc.config is not None and exc.table


def test_tuning_matches_exhaustive_scan(small_sim):
    data, _ = small_sim
    d = (1, 1)
    path = fit_coefficient_path(data, d)
    grid = TuningGrid(lower=[0.02, 0.02], upper=[0.4, 0.4], G=4, R=2)
    cfg, w, traces = tune_constraints(data, d, path, grid=grid)
    prev = np.full(data.n, 1 / data.n)
    for t in (1, 2):
        H = build_history(data, t)
        on = match_mask(data, d[:t])
        coef = path.history_coef(t)
        s1 = coef != 0
        if s1.sum() > H.width / 3:
            keep = np.argsort(-np.abs(coef), kind="stable")[: H.width // 3]
            s1 = np.zeros(H.width, bool)
            s1[keep] = True
        base = base_delta(data.n, H.width)
        found = None
        for g in grid.grids(0.02, 0.4):
            for a in g:
                for b in g:
                    step = solve_weights_step(H, prev, on, np.where(s1, a, b) * base, default_cap(data.n, t))
                    if step.feasible:
                        found = (a, b)
                        break
                if found:
                    break
            if found:
                break
        assert (traces[t - 1].K_a, traces[t - 1].K_b) == pytest.approx(found)
        prev = w.gamma[t - 1]


# ---------------------------------------------------------------------------
# diagnostics


def test_imbalance_report(small_sim, tmp_path):
    data, _ = small_sim
    w = solve_weight_sequence(data, (1, 1), BalanceConfig(delta=[0.5, 0.5]))
    rows = imbalance_report(w, data, tmp_path / "imb.csv")
    assert all(abs(r["gap"]) <= r["bound"] + 1e-8 for r in rows)
    assert (tmp_path / "imb.csv").read_text().startswith("period,column,gap,bound\n")


def test_single_unit_gaps_are_exact(small_sim):
    data, _ = small_sim
    d = np.ones_like(data.d)
    d[0] = 0
    data = PanelDataset(data.x, d, data.y)
    rows = imbalance_report(uniform_weights(data, (0, 0)), data)
    H1 = build_history(data, 1).values
    gaps1 = np.array([r["gap"] for r in rows if r["period"] == 1])
    gaps2 = np.array([r["gap"] for r in rows if r["period"] == 2])
    np.testing.assert_allclose(gaps1, H1[0] - H1.mean(axis=0), atol=1e-12)
    np.testing.assert_allclose(gaps2, 0.0, atol=1e-12)


def test_uniform_weights_unbalanced_under_confounding():
    data, _ = generate_dataset(SimConfig(n=400, T=2, p=20, eta=0.5), 0)
    d = (1, 1)
    path = fit_coefficient_path(data, d)
    _, tuned, _ = tune_constraints(data, d, path)
    base = uniform_weights(data, d)
    prev = np.full(data.n, 1 / data.n)
    H = build_history(data, 1).values
    raw = base.gamma[0] @ H - prev @ H
    assert np.any(np.abs(raw) > tuned.bounds[0])
    assert np.all(np.abs(tuned.gaps[0]) <= tuned.bounds[0] + 1e-8)
