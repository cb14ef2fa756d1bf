import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpie.basis import BasisSpec, assemble_design
from dpie.data import Dataset
from dpie.errors import StratumError
from dpie.scad import PenaltyConfig, _Standardized, fit_penalized_ls
from dpie.tuning import CVPlan, cv_select, lambda2_max, make_folds

from conftest import toy_dataset


def test_default_plan():
    p = CVPlan()
    assert p.folds == 10 and p.n_lambda == 50 and p.lambda_min_ratio == 1e-3
    assert len(p.sc_grid) == 13
    assert p.sc_grid[0] == pytest.approx(0.01) and p.sc_grid[-1] == pytest.approx(100)
    assert 1.0 in p.sc_grid


@pytest.mark.parametrize("kw", [dict(folds=1), dict(sc_grid=()), dict(sc_grid=(0.0,)), dict(n_lambda=0),
                                dict(lambda_min_ratio=1.0)])
def test_plan_validation(kw):
    with pytest.raises(ValueError):
        CVPlan(**kw)


@settings(max_examples=30, deadline=None)
@given(st.integers(10, 40), st.integers(10, 40), st.integers(0, 30), st.integers(2, 5), st.integers(0, 2**40))
def test_folds_are_stratified(n1, n0, m, k, seed):
    N = n1 + n0 + m
    A = np.r_[np.ones(n1), np.zeros(n0 + m)]
    S = np.r_[np.ones(n1 + n0), np.zeros(m)]
    ds = Dataset(np.arange(N, dtype=float)[:, None], A, np.zeros(N), S)
    if 0 < m < k:
        with pytest.raises(StratumError):
            make_folds(ds, k, seed)
        return
    f = make_folds(ds, k, seed)
    for mask in (A == 1, (A == 0) & (S == 1), S == 0):
        if mask.any():
            counts = np.bincount(f[mask], minlength=k)
            assert counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(f, make_folds(ds, k, seed))


def test_fold_seeds_differ(rng):
    ds = toy_dataset(rng)
    assert not np.array_equal(make_folds(ds, 5, 1), make_folds(ds, 5, 2))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.1, 1.0, 10.0]))
def test_lambda2_max_zeroes_every_penalized_coefficient(seed, sc):
    r = np.random.default_rng(seed)
    ds = toy_dataset(r, n=80, m=60, shift=1.5)
    D = assemble_design(ds, BasisSpec(2), BasisSpec(2))
    # zero is stationary at the top of the path, so descent from zero stays there
    cfg = PenaltyConfig(n_starts=1)
    top = lambda2_max(_Standardized(D, ds.Y), cfg.exempt, sc)
    at = fit_penalized_ls(D, ds.Y, cfg.with_lambdas(top / sc, top))
    assert set(at.active_beta) == {0, 1}
    assert at.active_delta == ()
    below = fit_penalized_ls(D, ds.Y, cfg.with_lambdas(0.7 * top / sc, 0.7 * top))
    assert len(below.active_beta) + len(below.active_delta) > 2


def test_cv_select_result_shape(rng, quick_plan):
    ds = toy_dataset(rng, shift=2.0)
    D = assemble_design(ds, BasisSpec(1), BasisSpec(1))
    cv = cv_select(D, ds.Y, ds, quick_plan)
    assert cv.mean_err.shape == (3, 8)
    assert cv.valid.all()
    i, k = np.unravel_index(np.nanargmin(cv.mean_err), cv.mean_err.shape)
    assert cv.best_lambda2 == cv.lambda2[i, k] and cv.best_sc == cv.sc[i]
    assert cv.best_lambda1 == pytest.approx(cv.best_lambda2 / cv.best_sc)
    np.testing.assert_allclose(cv.lambda2[:, 0] / cv.lambda2[:, -1], 1 / quick_plan.lambda_min_ratio)


def test_restrict_equals_fresh_run(rng, quick_plan):
    ds = toy_dataset(rng, shift=1.0)
    D = assemble_design(ds, BasisSpec(2), BasisSpec(1))
    full = cv_select(D, ds.Y, ds, quick_plan)
    fresh = cv_select(D, ds.Y, ds, quick_plan.replace(sc_grid=(1.0,)))
    sub = full.restrict([1.0])
    assert (sub.best_lambda1, sub.best_lambda2) == (fresh.best_lambda1, fresh.best_lambda2)
    np.testing.assert_array_equal(sub.mean_err, fresh.mean_err)


def test_cv_is_deterministic_and_csv(tmp_path, rng, quick_plan):
    ds = toy_dataset(rng)
    D = assemble_design(ds, BasisSpec(1), BasisSpec(1))
    a = cv_select(D, ds.Y, ds, quick_plan)
    b = cv_select(D, ds.Y, ds, quick_plan)
    np.testing.assert_array_equal(a.mean_err, b.mean_err)
    a.to_csv(tmp_path / "cv.csv")
    lines = (tmp_path / "cv.csv").read_text().splitlines()
    assert lines[0] == "sc,lambda2,lambda1,mean_err,se,valid"
    assert len(lines) == 1 + 3 * 8


def test_row_mismatch(rng, quick_plan):
    ds = toy_dataset(rng)
    D = assemble_design(ds, BasisSpec(1), BasisSpec(1))
    with pytest.raises(ValueError):
        cv_select(D, ds.Y[:-1], ds, quick_plan)
