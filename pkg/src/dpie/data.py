"""Dataset container, CSV ingestion, covariate preprocessing and matching.

A :class:`Dataset` holds randomized-experiment rows (``S == 1``) and external
control rows (``S == 0``) side by side.  External controls are untreated by
construction, so ``A == 0`` wherever ``S == 0``.
"""
from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import MatchError, ParseError, SchemaError, ValidityError

logger = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "MatchSpec",
    "MatchResult",
    "load_csv",
    "save_csv",
    "read_table",
    "scale_unit_interval",
    "pairwise_interactions",
    "drop_constant_columns",
    "match_external_controls",
    "atomic_write_text",
]


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable bundle of covariates, treatment, outcome and study indicator.

    Parameters
    ----------
    X : array, shape (N, d)
    A : array of {0, 1}, shape (N,)
    Y : array, shape (N,)
    S : array of {0, 1}, shape (N,)
        1 for randomized-experiment rows, 0 for external controls.
    column_names : sequence of str, length d
    dropped_columns : names removed during preprocessing, kept for reporting.
    scaling : optional mapping name -> (min, max) recorded by
        :func:`scale_unit_interval`.
    """

    X: np.ndarray
    A: np.ndarray
    Y: np.ndarray
    S: np.ndarray
    column_names: tuple = ()
    dropped_columns: tuple = ()
    scaling: dict | None = field(default=None)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        N = X.shape[0]
        A = np.asarray(self.A, dtype=float).ravel()
        Y = np.asarray(self.Y, dtype=float).ravel()
        S = np.asarray(self.S, dtype=float).ravel()
        if not (len(A) == len(Y) == len(S) == N):
            raise ValidityError(f"row count mismatch: X={N}, A={len(A)}, Y={len(Y)}, S={len(S)}")
        for name, v in (("A", A), ("S", S)):
            if not np.all((v == 0) | (v == 1)):
                raise ValidityError(f"{name} must contain only 0/1 values")
        bad = np.flatnonzero((S == 0) & (A == 1))
        if bad.size:
            raise ValidityError(f"external control rows must be untreated (S=0, A=1 at row {bad[0] + 1})")
        names = tuple(self.column_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ValidityError(f"{len(names)} column names for {X.shape[1]} columns")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "A", _frozen(A))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "S", _frozen(S))
        object.__setattr__(self, "column_names", names)
        object.__setattr__(self, "dropped_columns", tuple(self.dropped_columns))

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    @property
    def n(self) -> int:
        return int(np.sum(self.S == 1))

    @property
    def m(self) -> int:
        return int(np.sum(self.S == 0))

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return replace(self, X=self.X[rows], A=self.A[rows], Y=self.Y[rows], S=self.S[rows])

    def re_rows(self) -> "Dataset":
        return self.subset(np.flatnonzero(self.S == 1))

    def with_outcome(self, Y) -> "Dataset":
        return replace(self, Y=Y)


@dataclass(frozen=True)
class MatchSpec:
    ratio: int = 2
    distance: str = "mahalanobis"
    with_replacement: bool = False

    def __post_init__(self):
        if int(self.ratio) != self.ratio or self.ratio < 1:
            raise ValueError(f"ratio must be a positive integer, got {self.ratio!r}")
        if self.distance not in ("mahalanobis", "euclidean"):
            raise ValueError(f"unknown distance {self.distance!r}")


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------

def read_table(path) -> tuple[list[str], np.ndarray]:
    """Read a headed numeric CSV into (header, float matrix).

    Raises :class:`ParseError` naming the 1-based data row and the column of
    the first non-numeric cell.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = []
        for i, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}: row {i} has {len(rec)} fields, expected {len(header)}")
            vals = []
            for name, cell in zip(header, rec):
                try:
                    vals.append(float(cell))
                except ValueError:
                    raise ParseError(f"{path}: non-numeric value {cell!r} at row {i}, column {name!r}") from None
            rows.append(vals)
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, data


def _column(header, name, path):
    try:
        return header.index(name)
    except ValueError:
        raise SchemaError(f"{path}: missing column {name!r}") from None


def load_csv(path, outcome_col="Y", treat_col="A", study_col="S", require_study=True) -> Dataset:
    """Load a dataset; every column other than the three named ones is a covariate.

    Constant covariate columns are dropped and listed in
    ``Dataset.dropped_columns``.  With ``require_study=False`` a file without
    the study column is read as experiment-only (``S = 1`` everywhere).
    """
    header, data = read_table(path)
    if not require_study and study_col not in header:
        header = list(header) + [study_col]
        data = np.column_stack([data, np.ones(len(data))])
    idx = {role: _column(header, name, path)
           for role, name in (("Y", outcome_col), ("A", treat_col), ("S", study_col))}
    for role in ("A", "S"):
        col = data[:, idx[role]]
        bad = np.flatnonzero((col != 0) & (col != 1))
        if bad.size:
            raise ValidityError(f"{path}: column {header[idx[role]]!r} must be 0/1 (row {bad[0] + 1})")
    A, S = data[:, idx["A"]], data[:, idx["S"]]
    bad = np.flatnonzero((S == 0) & (A == 1))
    if bad.size:
        raise ValidityError(f"{path}: row {bad[0] + 1} is an external control (S=0) with A=1")
    xcols = [j for j in range(len(header)) if j not in idx.values()]
    if not np.any(S == 1):
        raise ValidityError(f"{path}: no randomized-experiment rows ({study_col}=1)")
    ds = Dataset(
        X=data[:, xcols].reshape(len(data), len(xcols)),
        A=A,
        Y=data[:, idx["Y"]],
        S=S,
        column_names=[header[j] for j in xcols],
    )
    return drop_constant_columns(ds)


def drop_constant_columns(ds: Dataset) -> Dataset:
    X = ds.X
    keep = [j for j in range(ds.d) if np.ptp(X[:, j]) > 0] if ds.N else list(range(ds.d))
    dropped = [ds.column_names[j] for j in range(ds.d) if j not in keep]
    if not dropped:
        return ds
    logger.info("dropping constant columns: %s", ", ".join(dropped))
    return replace(
        ds,
        X=X[:, keep].reshape(ds.N, len(keep)),
        column_names=[ds.column_names[j] for j in keep],
        dropped_columns=ds.dropped_columns + tuple(dropped),
    )


def atomic_write_text(path, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_csv(ds: Dataset, path, outcome_col="Y", treat_col="A", study_col="S") -> None:
    """Write ``ds`` as CSV; floats use ``repr`` so a reload is bit-exact."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(ds.column_names) + [outcome_col, treat_col, study_col])
    for i in range(ds.N):
        w.writerow([repr(float(v)) for v in ds.X[i]]
                   + [repr(float(ds.Y[i])), int(ds.A[i]), int(ds.S[i])])
    atomic_write_text(path, buf.getvalue())


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

def scale_unit_interval(ds: Dataset) -> Dataset:
    """Map every covariate to [0, 1] by ``(x - min) / (max - min)``."""
    X = ds.X
    lo, hi = X.min(axis=0), X.max(axis=0)
    rng = hi - lo
    zero = np.flatnonzero(rng == 0)
    if zero.size:
        raise ValidityError(f"column {ds.column_names[zero[0]]!r} is constant; drop it before scaling")
    Z = (X - lo) / rng
    # pin the endpoints so min/max are exactly 0/1
    Z[X == lo] = 0.0
    Z[X == hi] = 1.0
    scaling = {name: (float(a), float(b)) for name, a, b in zip(ds.column_names, lo, hi)}
    return replace(ds, X=Z, scaling=scaling)


def pairwise_interactions(ds: Dataset, include_squares: bool = False) -> Dataset:
    """Append products ``x_i * x_j`` (i < j) and optionally squares.

    Candidates that are constant, or equal to a column already present, are
    dropped and recorded in ``dropped_columns``.
    """
    if ds.d < 2:
        raise ValidityError("pairwise interactions need at least two covariates")
    names = list(ds.column_names)
    cols = [ds.X[:, j] for j in range(ds.d)]
    dropped = []
    for i in range(ds.d):
        partners = range(i, ds.d) if include_squares else range(i + 1, ds.d)
        for j in partners:
            name = f"{names[i]}^2" if i == j else f"{names[i]}*{names[j]}"
            v = ds.X[:, i] * ds.X[:, j]
            if np.ptp(v) == 0 or any(np.array_equal(v, c) for c in cols):
                dropped.append(name)
                continue
            cols.append(v)
            names.append(name)
    if dropped:
        logger.info("interaction columns dropped: %s", ", ".join(dropped))
    return replace(
        ds,
        X=np.column_stack(cols),
        column_names=names,
        dropped_columns=ds.dropped_columns + tuple(dropped),
    )


# --------------------------------------------------------------------------
# Matching
# --------------------------------------------------------------------------

class MatchResult(NamedTuple):
    controls: Dataset
    """Matched pool rows, relabelled ``S = 0`` and ``A = 0``."""
    report: np.ndarray
    """Rows of (cc_row, pool_row, distance)."""


def distance_matrix(left, right, metric="mahalanobis", reference=None):
    """Pairwise distances; Mahalanobis uses the covariance of ``reference``
    (default: the stacked rows of both sides)."""
    left = np.atleast_2d(left)
    right = np.atleast_2d(right)
    if metric == "euclidean":
        return cdist(left, right, "euclidean")
    ref = np.vstack([left, right]) if reference is None else reference
    cov = np.atleast_2d(np.cov(ref, rowvar=False))
    VI = np.linalg.pinv(cov)
    return cdist(left, right, "mahalanobis", VI=VI)


def greedy_match(dist, ratio=1, with_replacement=False):
    """Greedy nearest-neighbour assignment in row order of ``dist``.

    Each left row claims its ``ratio`` nearest unclaimed right rows; ties go to
    the lower right index.  Returns an int array of shape (n_left, ratio).
    """
    n_left, n_right = dist.shape
    if not with_replacement and n_right < ratio * n_left:
        raise MatchError(
            f"pool has {n_right} rows but {ratio} x {n_left} = {ratio * n_left} are needed "
            f"(short by {ratio * n_left - n_right})")
    taken = np.zeros(n_right, dtype=bool)
    out = np.empty((n_left, ratio), dtype=np.int64)
    for i in range(n_left):
        d = dist[i] if with_replacement else np.where(taken, np.inf, dist[i])
        pick = np.argsort(d, kind="stable")[:ratio]
        out[i] = pick
        if not with_replacement:
            taken[pick] = True
    return out


def match_external_controls(cc_rows: Dataset, pool: Dataset, spec: MatchSpec = MatchSpec()) -> MatchResult:
    """Build external controls by greedy nearest-neighbour matching.

    Covariates of both inputs are min-max scaled on their union before
    distances are taken.
    """
    if cc_rows.column_names != pool.column_names:
        raise ValidityError("concurrent controls and pool must share covariate columns")
    both = np.vstack([cc_rows.X, pool.X])
    lo, rng = both.min(axis=0), np.ptp(both, axis=0)
    rng[rng == 0] = 1.0
    L = (cc_rows.X - lo) / rng
    R = (pool.X - lo) / rng
    dist = distance_matrix(L, R, spec.distance, reference=np.vstack([L, R]))
    picks = greedy_match(dist, spec.ratio, spec.with_replacement)
    flat = picks.ravel()
    report = np.column_stack([
        np.repeat(np.arange(cc_rows.N), spec.ratio),
        flat,
        dist[np.repeat(np.arange(cc_rows.N), spec.ratio), flat],
    ])
    controls = replace(pool, X=pool.X[flat], A=np.zeros(len(flat)), Y=pool.Y[flat],
                       S=np.zeros(len(flat)), scaling=None)
    return MatchResult(controls, report)


def concat(parts: Sequence[Dataset]) -> Dataset:
    """Stack datasets with identical columns, preserving order."""
    names = parts[0].column_names
    for p in parts[1:]:
        if p.column_names != names:
            raise ValidityError("cannot concatenate datasets with different columns")
    return Dataset(
        X=np.vstack([p.X for p in parts]),
        A=np.concatenate([p.A for p in parts]),
        Y=np.concatenate([p.Y for p in parts]),
        S=np.concatenate([p.S for p in parts]),
        column_names=names,
    )
