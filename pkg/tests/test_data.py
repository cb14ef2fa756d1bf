import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dpie.data import (Dataset, MatchSpec, concat, distance_matrix, greedy_match, load_csv,
                       match_external_controls, pairwise_interactions, save_csv, scale_unit_interval)
from dpie.errors import MatchError, ParseError, SchemaError, ValidityError

from conftest import write_csv


def test_constant_column_is_dropped(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["x1", "k", "x2", "Y", "A", "S"],
                  [[1, 7, 0.5, 1.0, 1, 1], [2, 7, 0.1, 2.0, 0, 1], [3, 7, 0.3, 0.0, 0, 0], [4, 7, 0.9, 1.5, 0, 0]])
    ds = load_csv(p)
    assert ds.d == 2
    assert ds.column_names == ("x1", "x2")
    assert ds.dropped_columns == ("k",)
    np.testing.assert_array_equal(ds.X[:, 0], [1, 2, 3, 4])


def test_treated_external_control_cites_row(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["x", "Y", "A", "S"],
                  [[0.1, 1, 1, 1], [0.2, 1, 0, 1], [0.3, 1, 1, 0], [0.4, 1, 0, 0]])
    with pytest.raises(ValidityError, match="row 3"):
        load_csv(p)


def test_missing_column_is_named(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["x", "Y", "A"], [[0.1, 1, 1]])
    with pytest.raises(SchemaError, match="'S'"):
        load_csv(p)


def test_non_numeric_cell_reports_row_and_column(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["x", "Y", "A", "S"], [[0.1, 1, 1, 1], [0.2, "abc", 0, 1]])
    with pytest.raises(ParseError, match=r"row 2, column 'Y'"):
        load_csv(p)


def test_non_binary_indicator(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["x", "Y", "A", "S"], [[0.1, 1, 2, 1], [0.2, 1, 0, 1]])
    with pytest.raises(ValidityError):
        load_csv(p)


def test_custom_column_names(tmp_path):
    p = write_csv(tmp_path / "d.csv", ["age", "re78", "treat", "rct"],
                  [[20, 1.0, 1, 1], [30, 2.0, 0, 1], [40, 3.0, 0, 0]])
    ds = load_csv(p, "re78", "treat", "rct")
    assert (ds.n, ds.m) == (2, 1)
    np.testing.assert_array_equal(ds.Y, [1, 2, 3])


def test_nsw_shaped_counts(tmp_path, rng):
    n, m = 520, 520
    X = rng.normal(size=(n + m, 3))
    A = np.r_[np.repeat([1, 0], n // 2), np.zeros(m)]
    S = np.r_[np.ones(n), np.zeros(m)]
    rows = np.column_stack([X, rng.normal(size=n + m), A, S])
    p = write_csv(tmp_path / "nsw.csv", ["a", "b", "c", "Y", "A", "S"], rows.tolist())
    ds = load_csv(p)
    assert (ds.N, ds.n, ds.m) == (1040, 520, 520)


finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=40, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 12), st.integers(1, 4)), elements=finite), st.data())
def test_csv_round_trip_is_exact(tmp_path_factory, X, data):
    N = X.shape[0]
    S = np.array(data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=N, max_size=N)))
    S[0] = 1.0
    A = np.where(S == 1, data.draw(st.lists(st.sampled_from([0.0, 1.0]), min_size=N, max_size=N)), 0.0)
    Y = np.array(data.draw(st.lists(finite, min_size=N, max_size=N)))
    ds = Dataset(X, A, Y, S)
    path = tmp_path_factory.mktemp("rt") / "ds.csv"
    save_csv(ds, path)
    back = load_csv(path)
    keep = [j for j in range(X.shape[1]) if np.ptp(X[:, j]) > 0]
    np.testing.assert_array_equal(back.X, X[:, keep])
    for a, b in ((back.A, A), (back.Y, Y), (back.S, S)):
        np.testing.assert_array_equal(a, b)


def test_dataset_rejects_treated_external():
    with pytest.raises(ValidityError):
        Dataset(np.zeros((2, 1)), [0, 1], [0, 0], [1, 0])


def test_dataset_arrays_are_read_only():
    ds = Dataset(np.arange(4.0).reshape(4, 1), [1, 0, 0, 0], [1, 2, 3, 4], [1, 1, 0, 0])
    with pytest.raises(ValueError):
        ds.X[0, 0] = 5.0


@pytest.mark.parametrize("col, expected", [([2, 4, 6], [0, 0.5, 1]), ([-1, 0, 3], [0, 0.25, 1]), ([0, 1, 1], [0, 1, 1])])
def test_scale_unit_interval_values(col, expected):
    ds = Dataset(np.array(col, float)[:, None], [0, 0, 0], [0, 0, 0], [1, 1, 1])
    out = scale_unit_interval(ds)
    np.testing.assert_allclose(out.X[:, 0], expected, rtol=0, atol=1e-15)
    assert out.scaling == {"x1": (float(min(col)), float(max(col)))}


@settings(max_examples=60, deadline=None)
@given(arrays(float, st.tuples(st.integers(2, 30), st.integers(1, 4)), elements=finite))
def test_scaled_columns_hit_zero_and_one_exactly(X):
    X = X[:, np.ptp(X, axis=0) > 0]
    if X.shape[1] == 0:
        return
    N = X.shape[0]
    out = scale_unit_interval(Dataset(X, np.zeros(N), np.zeros(N), np.ones(N)))
    assert np.all(out.X.min(axis=0) == 0.0)
    assert np.all(out.X.max(axis=0) == 1.0)


def test_scaling_constant_column_errors():
    ds = Dataset(np.ones((3, 1)), [0, 0, 0], [0, 0, 0], [1, 1, 1])
    with pytest.raises(ValidityError):
        scale_unit_interval(ds)


def test_interactions_count_without_squares(rng):
    ds = Dataset(rng.normal(size=(20, 3)), np.zeros(20), np.zeros(20), np.ones(20), ("a", "b", "c"))
    out = pairwise_interactions(ds, include_squares=False)
    assert out.d == 6
    assert out.column_names[3:] == ("a*b", "a*c", "b*c")


def test_binary_square_is_dropped(rng):
    b = rng.integers(0, 2, 30).astype(float)
    X = np.column_stack([rng.normal(size=30), b])
    ds = Dataset(X, np.zeros(30), np.zeros(30), np.ones(30), ("u", "b"))
    out = pairwise_interactions(ds, include_squares=True)
    assert "b^2" in out.dropped_columns
    assert "b^2" not in out.column_names
    assert out.d == 4  # u, b, u^2, u*b


def test_interactions_need_two_columns():
    with pytest.raises(ValidityError):
        pairwise_interactions(Dataset(np.arange(3.0)[:, None], np.zeros(3), np.zeros(3), np.ones(3)))


@settings(max_examples=50, deadline=None)
@given(arrays(float, st.tuples(st.integers(3, 15), st.integers(2, 4)), elements=st.sampled_from([0.0, 1.0, 2.0])),
       st.booleans())
def test_interactions_never_duplicate(X, squares):
    N = X.shape[0]
    X = X[:, np.ptp(X, axis=0) > 0]
    X = np.unique(X, axis=1)
    if X.shape[1] < 2:
        return
    out = pairwise_interactions(Dataset(X, np.zeros(N), np.zeros(N), np.ones(N)), squares)
    cols = {tuple(c) for c in out.X.T}
    assert len(cols) == out.d


def test_self_match_has_zero_distance(rng):
    X = rng.normal(size=(15, 3))
    cc = Dataset(X, np.zeros(15), rng.normal(size=15), np.ones(15))
    pool = Dataset(X, np.zeros(15), rng.normal(size=15), np.zeros(15))
    res = match_external_controls(cc, pool, MatchSpec(ratio=1))
    np.testing.assert_array_equal(res.report[:, 1], np.arange(15))
    np.testing.assert_allclose(res.report[:, 2], 0.0, atol=1e-9)
    assert np.all(res.controls.S == 0) and np.all(res.controls.A == 0)


def test_pool_shortfall_is_reported(rng):
    cc = Dataset(rng.normal(size=(3, 2)), np.zeros(3), np.zeros(3), np.ones(3))
    pool = Dataset(rng.normal(size=(5, 2)), np.zeros(5), np.zeros(5), np.zeros(5))
    with pytest.raises(MatchError, match="6 are needed"):
        match_external_controls(cc, pool, MatchSpec(ratio=2))


def test_ratio_two_gives_double_rows(rng):
    cc = Dataset(rng.normal(size=(260, 3)), np.zeros(260), np.zeros(260), np.ones(260))
    pool = Dataset(rng.normal(size=(2000, 3)), np.zeros(2000), rng.normal(size=2000), np.zeros(2000))
    res = match_external_controls(cc, pool, MatchSpec(ratio=2))
    assert res.controls.N == 520
    assert len(np.unique(res.report[:, 1])) == 520


def test_ties_go_to_lower_index():
    dist = np.array([[1.0, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]])
    np.testing.assert_array_equal(greedy_match(dist, 1), [[1], [0]])
    np.testing.assert_array_equal(greedy_match(dist, 1, with_replacement=True), [[1], [0]])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(1, 3), st.integers(0, 10), st.integers(0, 2**31))
def test_no_pool_row_reused(n_cc, ratio, extra, seed):
    r = np.random.default_rng(seed)
    dist = r.integers(0, 3, size=(n_cc, n_cc * ratio + extra)).astype(float)
    picks = greedy_match(dist, ratio)
    assert len(np.unique(picks)) == picks.size


def test_euclidean_and_mahalanobis_agree_on_whitened_data(rng):
    Z = rng.normal(size=(400, 2))
    L, R = Z[:5], Z[5:20]
    d_e = distance_matrix(L, R, "euclidean")
    d_m = distance_matrix(L, R, "mahalanobis", reference=Z)
    assert np.corrcoef(d_e.ravel(), d_m.ravel())[0, 1] > 0.95


def test_match_spec_rejects_zero_ratio():
    with pytest.raises(ValueError):
        MatchSpec(ratio=0)


def test_concat_preserves_order(rng):
    a = Dataset(rng.normal(size=(3, 2)), [1, 0, 0], [1, 2, 3], [1, 1, 1])
    b = Dataset(rng.normal(size=(2, 2)), [0, 0], [4, 5], [0, 0])
    c = concat([a, b])
    np.testing.assert_array_equal(c.Y, [1, 2, 3, 4, 5])
    assert (c.n, c.m) == (3, 2)
