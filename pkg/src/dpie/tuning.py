"""Cross-validated choice of the two penalty levels.

The grid is parametrized by ``sc = lambda2 / lambda1``.  For each ``sc`` a
log-spaced ``lambda2`` path runs from the smallest value that zeroes every
penalized coefficient down to ``lambda_min_ratio`` times that value.
Candidates are scored by the held-out squared error of the post-selection
OLS refit.
"""
from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .basis import BIAS, INTERCEPT, DesignMatrix
from .data import Dataset, atomic_write_text
from .errors import CVError, StratumError
from .scad import PenaltyConfig, _cv_path, _Standardized

__all__ = ["CVPlan", "CVResult", "make_folds", "cv_select", "lambda2_max"]


def _default_sc_grid():
    return tuple(float(v) for v in np.logspace(-2, 2, 13))


@dataclass(frozen=True)
class CVPlan:
    folds: int = 10
    sc_grid: tuple = field(default_factory=_default_sc_grid)
    n_lambda: int = 50
    lambda_min_ratio: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sc_grid", tuple(float(s) for s in self.sc_grid))
        if self.folds < 2:
            raise ValueError("folds must be at least 2")
        if not self.sc_grid or min(self.sc_grid) <= 0:
            raise ValueError("sc_grid must be non-empty and strictly positive")
        if self.n_lambda < 1:
            raise ValueError("n_lambda must be positive")
        if not 0 < self.lambda_min_ratio < 1:
            raise ValueError("lambda_min_ratio must lie in (0, 1)")

    def replace(self, **kw) -> "CVPlan":
        d = dict(folds=self.folds, sc_grid=self.sc_grid, n_lambda=self.n_lambda,
                 lambda_min_ratio=self.lambda_min_ratio, seed=self.seed)
        d.update(kw)
        return CVPlan(**d)


@dataclass
class CVResult:
    best_lambda1: float
    best_lambda2: float
    best_sc: float
    sc: np.ndarray
    """Per-cell arrays below have shape (len(sc_grid), n_lambda)."""
    lambda2: np.ndarray
    lambda1: np.ndarray
    mean_err: np.ndarray
    se: np.ndarray
    valid: np.ndarray
    folds_used: np.ndarray

    def restrict(self, sc_values) -> "CVResult":
        """The result cross-validation would give on a sub-grid of ``sc``.

        Paths, folds and errors do not depend on the other ``sc`` values, so
        this equals a fresh run with ``sc_grid=sc_values`` and the same seed.
        """
        rows = np.flatnonzero(np.isin(self.sc, np.asarray(sc_values, dtype=float)))
        if rows.size == 0:
            raise ValueError(f"none of {sc_values} is on the grid")
        valid = self.valid[rows]
        if not valid.any():
            raise CVError("every cross-validation cell failed to converge or refit")
        flat = np.where(valid, self.mean_err[rows], np.inf)
        i, k = np.unravel_index(int(np.argmin(flat)), flat.shape)
        return CVResult(float(self.lambda1[rows][i, k]), float(self.lambda2[rows][i, k]),
                        float(self.sc[rows][i]), self.sc[rows], self.lambda2[rows], self.lambda1[rows],
                        self.mean_err[rows], self.se[rows], valid, self.folds_used)

    def table_rows(self):
        for i in range(self.lambda2.shape[0]):
            for k in range(self.lambda2.shape[1]):
                yield (self.sc[i], self.lambda2[i, k], self.lambda1[i, k],
                       self.mean_err[i, k], self.se[i, k], bool(self.valid[i, k]))

    def to_csv(self, path) -> None:
        buf = io.StringIO()
        buf.write("sc,lambda2,lambda1,mean_err,se,valid\n")
        for row in self.table_rows():
            buf.write(",".join(repr(float(v)) for v in row[:5]) + f",{int(row[5])}\n")
        atomic_write_text(path, buf.getvalue())


def make_folds(ds: Dataset, k: int, seed: int = 0) -> np.ndarray:
    """Fold label per row, stratified on (A, S).

    Rows of each non-empty stratum are shuffled with a Philox stream keyed by
    ``seed`` and dealt round-robin, so every fold sees every stratum.
    """
    if k < 2:
        raise ValueError("need at least 2 folds")
    rng = np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))
    labels = np.empty(ds.N, dtype=np.int64)
    for a, s, name in ((1, 1, "treated RE"), (0, 1, "control RE"), (0, 0, "external control")):
        rows = np.flatnonzero((ds.A == a) & (ds.S == s))
        if rows.size == 0:
            continue
        if rows.size < k:
            raise StratumError(f"stratum {name} (A={a}, S={s}) has {rows.size} rows, fewer than {k} folds")
        rows = rows[rng.permutation(rows.size)]
        labels[rows] = np.arange(rows.size) % k
    return labels


def _lam_scale(groups, exempt, sc):
    out = np.zeros(len(groups))
    for j, g in enumerate(groups):
        if g in exempt or g == INTERCEPT:
            continue
        out[j] = 1.0 if g == BIAS else 1.0 / sc
    return out


def _null_scores(st: _Standardized, exempt):
    """|z_j| for penalized columns after an OLS fit on the exempt ones."""
    free = np.array([(g in exempt) and not st.degenerate[j] for j, g in enumerate(st.groups)])
    theta = np.zeros(len(st.c))
    if free.any():
        theta[free] = np.linalg.lstsq(st.G[np.ix_(free, free)], st.c[free], rcond=None)[0]
    z = np.abs(st.c - st.G @ theta)
    z[free | st.degenerate] = 0.0
    return z


def lambda2_max(st: _Standardized, exempt, sc) -> float:
    """Smallest lambda2 at which zero is a stationary point for every
    penalized coefficient, given ``lambda1 = lambda2 / sc``."""
    z = _null_scores(st, exempt)
    is_bias = np.array([g == BIAS for g in st.groups])
    zb = z[is_bias].max() if is_bias.any() else 0.0
    zm = z[~is_bias].max() if (~is_bias).any() else 0.0
    val = 2.0 * max(zb, sc * zm)
    return val if val > 0 else 1.0


def cv_select(D: DesignMatrix, y, ds: Dataset, plan: CVPlan = CVPlan(),
              cfg_base: PenaltyConfig = PenaltyConfig()) -> CVResult:
    """K-fold selection of (lambda1, lambda2) over the sc x lambda2 grid."""
    y = np.asarray(y, dtype=float)
    if D.M.shape[0] != len(y) or ds.N != len(y):
        raise ValueError("design, response and dataset must have the same rows")
    folds = make_folds(ds, plan.folds, plan.seed)
    st_full = _Standardized(D, y)
    exempt = cfg_base.exempt
    n_sc, nl = len(plan.sc_grid), plan.n_lambda
    lam2 = np.empty((n_sc, nl))
    for i, sc in enumerate(plan.sc_grid):
        top = lambda2_max(st_full, exempt, sc)
        lam2[i] = np.geomspace(top, top * plan.lambda_min_ratio, nl) if nl > 1 else [top]
    errs = np.full((n_sc, nl, plan.folds), np.nan)
    conv = np.zeros((n_sc, nl, plan.folds), dtype=bool)
    icpt = int(D.columns(INTERCEPT)[0])
    M = np.ascontiguousarray(D.M)
    for f in range(plan.folds):
        te = np.flatnonzero(folds == f)
        tr = np.flatnonzero(folds != f)
        assert np.intersect1d(te, tr).size == 0
        st = _Standardized(D, y, rows=tr)
        Mtr = M[tr]
        gram_tr = Mtr.T @ Mtr
        xty_tr = Mtr.T @ y[tr]
        always = np.zeros(D.K, dtype=np.bool_)
        always[icpt] = True
        for j, col in enumerate(st.cols):
            if st.groups[j] in exempt and not st.degenerate[j]:
                always[col] = True
        D_te = np.ascontiguousarray(M[te])
        y_te = np.ascontiguousarray(y[te])
        for i, sc in enumerate(plan.sc_grid):
            scale = np.where(st.degenerate, 0.0, _lam_scale(st.groups, exempt, sc))
            e, c, _ = _cv_path(st.G, st.c, st.yy, scale, lam2[i], float(cfg_base.a),
                               float(cfg_base.tol), int(cfg_base.max_sweeps), st.cols, always,
                               gram_tr, xty_tr, D_te, y_te)
            errs[i, :, f] = e
            conv[i, :, f] = c
    usable = conv & np.isfinite(errs)
    count = usable.sum(axis=2)
    valid = count > 0
    masked = np.where(usable, errs, 0.0)
    mean_err = np.where(valid, masked.sum(axis=2) / np.maximum(count, 1), np.nan)
    sq = np.where(usable, (errs - mean_err[..., None]) ** 2, 0.0)
    se = np.where(count > 1, np.sqrt(sq.sum(axis=2) / np.maximum(count - 1, 1)) / np.sqrt(np.maximum(count, 1)), np.nan)
    if not valid.any():
        raise CVError("every cross-validation cell failed to converge or refit")
    flat = np.where(valid, mean_err, np.inf)
    i, k = np.unravel_index(int(np.argmin(flat)), flat.shape)
    sc_arr = np.asarray(plan.sc_grid)
    lam1 = lam2 / sc_arr[:, None]
    return CVResult(
        best_lambda1=float(lam1[i, k]),
        best_lambda2=float(lam2[i, k]),
        best_sc=float(sc_arr[i]),
        sc=sc_arr,
        lambda2=lam2,
        lambda1=lam1,
        mean_err=mean_err,
        se=se,
        valid=valid,
        folds_used=folds,
    )
