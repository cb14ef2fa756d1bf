"""Power-series sieve bases and design-matrix assembly."""
from __future__ import annotations

import io
import itertools
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .data import Dataset, atomic_write_text
from .errors import RankDeficiencyError

__all__ = [
    "BasisSpec",
    "DesignMatrix",
    "basis_exponents",
    "power_basis",
    "orthonormalize",
    "assemble_design",
    "INTERCEPT",
    "TREATMENT",
    "MU",
    "BIAS",
]

INTERCEPT, TREATMENT, MU, BIAS = "intercept", "treatment", "mu_basis", "bias_basis"


@dataclass(frozen=True)
class BasisSpec:
    """Power-series basis of maximum power ``max_power``.

    ``total_degree`` keeps monomials with total degree <= q;
    ``tensor_product`` keeps those with every exponent <= q ((q+1)^d terms
    including the constant).  ``include_cross_terms=False`` restricts
    ``total_degree`` to pure powers of single covariates.
    ``include_constant`` prepends the constant function.  It is meant for the
    bias basis, where a constant external-control shift then enters as a
    ``(1-S)`` column.
    """

    max_power: int = 3
    scheme: str = "total_degree"
    include_cross_terms: bool = True
    include_constant: bool = False

    def __post_init__(self):
        if int(self.max_power) != self.max_power or self.max_power < 1:
            raise ValueError(f"max_power must be a positive integer, got {self.max_power!r}")
        if self.scheme not in ("total_degree", "tensor_product"):
            raise ValueError(f"unknown basis scheme {self.scheme!r}")


@lru_cache(maxsize=64)
def _exponents(d, q, scheme, cross):
    if scheme == "tensor_product":
        if (q + 1) ** d > 10**6:
            raise ValueError(f"tensor-product basis with d={d}, q={q} has more than 10^6 terms")
        exps = [e for e in itertools.product(range(q + 1), repeat=d) if any(e)]
    elif cross:
        # each monomial of degree p is a multiset of p covariate indices
        exps = []
        for p in range(1, q + 1):
            for combo in itertools.combinations_with_replacement(range(d), p):
                e = [0] * d
                for j in combo:
                    e[j] += 1
                exps.append(tuple(e))
    else:
        exps = []
        for j in range(d):
            for p in range(1, q + 1):
                e = [0] * d
                e[j] = p
                exps.append(tuple(e))
    # graded lexicographic: total degree, then larger leading exponents first
    exps.sort(key=lambda e: (sum(e), tuple(-x for x in e)))
    return tuple(exps)


def basis_exponents(d: int, spec: BasisSpec) -> tuple:
    """Exponent tuples of the basis columns, in output order."""
    return _exponents(int(d), spec.max_power, spec.scheme, spec.include_cross_terms)


def _monomial_name(e, names):
    parts = []
    for p, nm in zip(e, names):
        if p == 1:
            parts.append(nm)
        elif p > 1:
            parts.append(f"{nm}^{p}")
    return "*".join(parts)


def power_basis(X, spec: BasisSpec, names=None):
    """Evaluate the monomial basis at the rows of ``X``.

    There is no constant column unless ``spec.include_constant`` is set.

    >>> power_basis(np.array([[2.0]]), BasisSpec(3))
    array([[2., 4., 8.]])
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    exps = basis_exponents(X.shape[1], spec)
    q = spec.max_power
    # powers[p][:, j] = X[:, j] ** p, built by repeated multiplication
    powers = [np.ones_like(X), X]
    for _ in range(2, q + 1):
        powers.append(powers[-1] * X)
    out = np.empty((X.shape[0], len(exps)))
    for k, e in enumerate(exps):
        col = np.ones(X.shape[0])
        for j, p in enumerate(e):
            if p:
                col = col * powers[p][:, j]
        out[:, k] = col
    labels = [_monomial_name(e, names) for e in exps] if names is not None else None
    if spec.include_constant:
        out = np.column_stack([np.ones(X.shape[0]), out])
        labels = None if labels is None else ["1"] + labels
    if names is not None:
        return out, labels
    return out


def _first_dependent_column(B, rtol=1e-10):
    """Index of the first column lying in the span of the ones before it."""
    norms = np.linalg.norm(B, axis=0)
    scale = norms.max() if norms.size and norms.max() > 0 else 1.0
    for j in range(B.shape[1]):
        if norms[j] <= rtol * scale:
            return j
        if j:
            Q, _ = np.linalg.qr(B[:, :j])
            resid = B[:, j] - Q @ (Q.T @ B[:, j])
            if np.linalg.norm(resid) <= rtol * max(norms[j], scale):
                return j
    return None


def orthonormalize(B):
    """Return ``(R, A_K)`` with ``R = B @ A_K.T`` and ``R.T @ R / N = I``.

    ``A_K`` is the inverse of the lower Cholesky factor of ``B.T @ B / N``,
    so its diagonal is positive and the result is reproducible.
    """
    B = np.asarray(B, dtype=float)
    N, k = B.shape
    G = B.T @ B / N
    try:
        L = np.linalg.cholesky(G)
        ok = np.all(np.diag(L) > 1e-7 * np.sqrt(max(np.max(np.diag(G)), 1e-300)))
    except np.linalg.LinAlgError:
        ok = False
    if not ok:
        j = _first_dependent_column(B)
        j = k - 1 if j is None else j
        raise RankDeficiencyError(f"basis column {j} is linearly dependent on earlier columns")
    A_K = np.linalg.solve(L, np.eye(k))
    return B @ A_K.T, A_K


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regressors ``[1 | A | p_mu(X) | (1-S) p_b(X)]`` with column-group labels."""

    M: np.ndarray
    groups: tuple
    names: tuple
    bias_degenerate: bool = False
    S: np.ndarray | None = None
    """Study indicator of each row, when known."""

    @property
    def K(self) -> int:
        return self.M.shape[1]

    @property
    def K1(self) -> int:
        return sum(g != BIAS for g in self.groups)

    @property
    def K2(self) -> int:
        return sum(g == BIAS for g in self.groups)

    def columns(self, *groups) -> np.ndarray:
        return np.array([j for j, g in enumerate(self.groups) if g in groups], dtype=np.int64)

    @property
    def treatment_index(self):
        idx = self.columns(TREATMENT)
        return int(idx[0]) if idx.size else None

    def subset_rows(self, rows) -> "DesignMatrix":
        S = None if self.S is None else self.S[rows]
        return DesignMatrix(self.M[rows], self.groups, self.names, self.bias_degenerate, S)

    def drop_groups(self, *groups) -> "DesignMatrix":
        keep = [j for j, g in enumerate(self.groups) if g not in groups]
        return DesignMatrix(self.M[:, keep], tuple(self.groups[j] for j in keep),
                            tuple(self.names[j] for j in keep), False, self.S)

    def to_csv(self, path) -> None:
        """Write with a leading ``# groups:`` line, then a header of column names."""
        buf = io.StringIO()
        buf.write("# groups: " + ",".join(self.groups) + "\n")
        buf.write(",".join(self.names) + "\n")
        for row in self.M:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        atomic_write_text(path, buf.getvalue())


def assemble_design(ds: Dataset, mu_spec: BasisSpec = BasisSpec(), b_spec: BasisSpec = BasisSpec(),
                    include_treatment: bool | None = None) -> DesignMatrix:
    """Stack intercept, treatment, outcome-model basis and masked bias basis.

    ``include_treatment=None`` drops the treatment column when nobody is
    treated (pure regression designs).
    """
    if mu_spec.include_constant:
        raise ValueError("the outcome-model basis already has the intercept; include_constant is for the bias basis")
    if include_treatment is None:
        include_treatment = bool(np.any(ds.A == 1))
    P_mu, mu_names = power_basis(ds.X, mu_spec, names=ds.column_names)
    P_b, b_names = power_basis(ds.X, b_spec, names=ds.column_names)
    ec = (ds.S == 0)
    # exact zeros on RE rows, not (1 - S) * value
    P_b = np.where(ec[:, None], P_b, 0.0)
    blocks = [np.ones((ds.N, 1))]
    groups = [INTERCEPT]
    names = ["(intercept)"]
    if include_treatment:
        blocks.append(ds.A[:, None])
        groups.append(TREATMENT)
        names.append("A")
    blocks += [P_mu, P_b]
    groups += [MU] * P_mu.shape[1] + [BIAS] * P_b.shape[1]
    names += list(mu_names) + ["(1-S)" if nm == "1" else f"(1-S)*{nm}" for nm in b_names]
    M = np.hstack(blocks)
    M.setflags(write=False)
    return DesignMatrix(M, tuple(groups), tuple(names), bias_degenerate=not ec.any(), S=ds.S)
