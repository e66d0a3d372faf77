import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcb.errors import MissingCell, NonBinaryTreatment, ParseError, PeriodOutOfRange
from dcb.panel import (
    PanelDataset,
    build_history,
    load_panel,
    match_mask,
    treatment_history,
    write_panel,
)

from conftest import random_panel


def _write(tmp_path, text, name="p.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_load_minimal_panel(tmp_path):
    path = _write(
        tmp_path,
        "unit_id,period,treatment,outcome,x1\n"
        "b,2,0,4.0,0.4\n"
        "a,1,1,1.0,0.1\n"
        "a,2,1,2.0,0.2\n"
        "b,1,0,3.0,0.3\n",
    )
    data = load_panel(path)
    assert (data.n, data.T, data.p_cov) == (2, 2, 1)
    assert data.unit_ids == ("a", "b")
    np.testing.assert_array_equal(data.y, [[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(data.x[:, :, 0], [[0.1, 0.2], [0.3, 0.4]])


def test_load_non_binary_treatment(tmp_path):
    path = _write(tmp_path, "unit_id,period,treatment,outcome,x1\n1,1,2,1.0,0.1\n")
    with pytest.raises(NonBinaryTreatment):
        load_panel(path)


def test_load_ragged_panel(tmp_path):
    path = _write(
        tmp_path,
        "unit_id,period,treatment,outcome,x1\n1,1,1,1.0,0.1\n1,2,1,1.0,0.1\n2,1,0,1.0,0.1\n",
    )
    with pytest.raises(MissingCell):
        load_panel(path)


def test_parse_error_location(tmp_path):
    path = _write(tmp_path, "unit_id,period,treatment,outcome,x1\n1,1,1,abc,0.1\n")
    with pytest.raises(ParseError) as info:
        load_panel(path)
    assert info.value.row == 2 and info.value.column == "outcome"


def test_missing_column_and_schema(tmp_path):
    text = "id,time,w,out,age\n1,1,1,1.0,30\n2,1,0,2.0,40\n"
    path = _write(tmp_path, text)
    with pytest.raises(ParseError):
        load_panel(path)
    schema = {"unit": "id", "period": "time", "treatment": "w", "outcome": "out", "covariates": ["age"]}
    data = load_panel(path, schema)
    assert data.covariate_names == ("age",) and data.T == 1


def test_csv_round_trip(tmp_path):
    data = random_panel(np.random.default_rng(0), n=7, T=3, p=2)
    write_panel(data, tmp_path / "r.csv")
    back = load_panel(tmp_path / "r.csv")
    np.testing.assert_array_equal(back.x, data.x)
    np.testing.assert_array_equal(back.d, data.d)
    np.testing.assert_array_equal(back.y, data.y)


def test_dataset_is_immutable():
    data = random_panel(np.random.default_rng(1))
    with pytest.raises(ValueError):
        data.x[0, 0, 0] = 1.0
    with pytest.raises(NonBinaryTreatment):
        PanelDataset(data.x, np.full(data.d.shape, 3), data.y)


@pytest.mark.parametrize(
    "t, p, intercept, width",
    [(1, 2, True, 3), (2, 2, True, 7), (3, 100, False, 304)],
)
def test_history_width(t, p, intercept, width):
    data = random_panel(np.random.default_rng(2), n=5, T=3, p=p)
    assert build_history(data, t, intercept=intercept).width == width


def test_history_layout_and_values():
    data = random_panel(np.random.default_rng(3), n=6, T=2, p=2)
    H = build_history(data, 2)
    assert H.col_names == ("d1", "x1_t1", "x2_t1", "x1_t2", "x2_t2", "y1", "intercept")
    np.testing.assert_array_equal(H.values[:, 0], data.d[:, 0])
    np.testing.assert_array_equal(H.values[:, 3:5], data.x[:, 1])
    np.testing.assert_array_equal(H.values[:, 5], data.y[:, 0])
    np.testing.assert_array_equal(H.values[:, 6], 1.0)
    Hi = build_history(data, 2, interactions=True)
    assert Hi.width == 7 + 4
    np.testing.assert_array_equal(Hi.values[:, 7], data.d[:, 0] * data.x[:, 0, 0])


def test_history_period_out_of_range():
    data = random_panel(np.random.default_rng(4))
    for t in (0, 3):
        with pytest.raises(PeriodOutOfRange):
            build_history(data, t)


def test_match_mask_example():
    x = np.zeros((3, 2, 1))
    d = np.array([[1, 0], [0, 1], [1, 1]])
    data = PanelDataset(x, d, np.zeros((3, 2)))
    np.testing.assert_array_equal(match_mask(data, (1,)), [True, False, True])
    with pytest.raises(ValueError):
        match_mask(data, ())


def test_treatment_history_parsing():
    assert treatment_history("1, 0,1") == (1, 0, 1)
    assert treatment_history([1, 1]) == (1, 1)
    for bad in ("1,2", "a,b", ""):
        with pytest.raises(ValueError):
            treatment_history(bad)


def test_stratum_size_matches_joint_propensity():
    from dcb.simulation import SimConfig, generate_dataset

    counts = []
    for seed in range(20):
        data, _ = generate_dataset(SimConfig(n=400, T=2, p=100, eta=0.1), seed)
        counts.append(match_mask(data, (1, 1)).sum())
    # roughly n times the median joint propensity 0.218
    assert abs(np.mean(counts) / 400 - 0.218) < 0.06


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    T=st.integers(1, 4),
    p=st.integers(1, 3),
    intercept=st.booleans(),
)
def test_history_prefix_extension(seed, T, p, intercept):
    data = random_panel(np.random.default_rng(seed), n=8, T=T, p=p)
    for t in range(1, T + 1):
        H = build_history(data, t, intercept=intercept)
        assert H.width == (t - 1) + t * p + (t - 1) + intercept
        if t == 1:
            continue
        prev = build_history(data, t - 1, intercept=intercept)
        keep = [
            j
            for j, name in enumerate(H.col_names)
            if name != f"d{t - 1}" and not name.endswith(f"_t{t}") and name != f"y{t - 1}"
        ]
        np.testing.assert_array_equal(H.values[:, keep], prev.values)
        assert tuple(H.col_names[j] for j in keep) == prev.col_names


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31), bits=st.lists(st.integers(0, 1), min_size=1, max_size=3))
def test_match_mask_nesting(seed, bits):
    data = random_panel(np.random.default_rng(seed), n=40, T=3, p=1)
    for s in range(1, len(bits)):
        assert np.all(match_mask(data, bits[:s]) >= match_mask(data, bits))
    expect = np.all(data.d[:, : len(bits)] == bits, axis=1)
    np.testing.assert_array_equal(match_mask(data, bits), expect)
