"""SCAD penalty, two-group penalized least squares and post-selection refit.

The fitted objective is

    sum_i (y_i - d_i' theta)^2 + N * sum_j P_{lambda_j}(|theta_j^std|)

where ``theta^std`` are the coefficients on mean-centred, unit-variance
columns (the intercept is never penalized).  Mean-basis columns use
``lambda1`` and bias-basis columns ``lambda2``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .basis import BIAS, INTERCEPT, MU, TREATMENT, DesignMatrix
from .errors import RankDeficiencyError

__all__ = [
    "PenaltyConfig",
    "FitResult",
    "scad_derivative",
    "scad_value",
    "scad_univariate_update",
    "penalized_objective",
    "fit_penalized_ls",
    "refit_ols",
    "column_penalties",
]


def _check_a(a):
    if not a > 2:
        raise ValueError(f"SCAD shape parameter a must exceed 2, got {a!r}")


def scad_derivative(t, lam, a=3.7):
    """Derivative of the SCAD penalty at ``t >= 0``."""
    _check_a(a)
    t = np.asarray(t, dtype=float)
    lam = float(lam)
    if lam == 0:
        out = np.zeros_like(t)
    else:
        out = np.where(t <= lam, lam, np.maximum(a * lam - t, 0.0) / (a - 1))
    return out[()] if out.ndim == 0 else out


def scad_value(t, lam, a=3.7):
    """SCAD penalty at ``t >= 0`` (antiderivative of :func:`scad_derivative`, zero at 0)."""
    _check_a(a)
    t = np.asarray(t, dtype=float)
    lam = float(lam)
    mid = (2 * a * lam * t - t * t - lam * lam) / (2 * (a - 1))
    out = np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, lam * lam * (a + 1) / 2))
    return out[()] if out.ndim == 0 else out


@njit(cache=True)
def _pen(t, lam, a):
    if t <= lam:
        return lam * t
    if t <= a * lam:
        return (2.0 * a * lam * t - t * t - lam * lam) / (2.0 * (a - 1.0))
    return lam * lam * (a + 1.0) / 2.0


@njit(cache=True)
def scad_univariate_update(z, v, lam, a):
    """Global minimizer of ``0.5*v*t**2 - z*t + P_lam(|t|)`` over real ``t``.

    Every candidate (the stationary point of each of the three pieces plus
    the knots ``0``, ``lam`` and ``a*lam``) is scored and the lowest wins;
    exact ties go to the smaller magnitude.
    """
    if lam <= 0.0:
        return z / v
    az = abs(z)
    if az == 0.0:
        return 0.0
    best_t = 0.0
    best_f = 0.0
    cands = np.empty(5)
    cands[0] = (az - lam) / v
    denom = v - 1.0 / (a - 1.0)
    cands[1] = (az - a * lam / (a - 1.0)) / denom if denom > 0.0 else -1.0
    cands[2] = az / v
    cands[3] = lam
    cands[4] = a * lam
    for k in range(5):
        t = cands[k]
        if t <= 0.0:
            continue
        if k == 0 and t > lam:
            continue
        if k == 1 and (t <= lam or t > a * lam):
            continue
        if k == 2 and t <= a * lam:
            continue
        f = 0.5 * v * t * t - az * t + _pen(t, lam, a)
        if f < best_f or (f == best_f and t < best_t):
            best_f = f
            best_t = t
    return best_t if z > 0 else -best_t


@njit(cache=True)
def _objective(G, c, yy, theta, g, lam, a):
    # per-observation objective: yy - 2 c'theta + theta'G theta + sum P
    val = yy
    for j in range(len(c)):
        val += theta[j] * (g[j] - 2.0 * c[j])
        if lam[j] > 0.0:
            val += _pen(abs(theta[j]), lam[j], a)
    return val


@njit(cache=True)
def _cd(G, c, yy, lam, a, theta, tol, max_sweeps):
    """Cyclic coordinate descent on the standardized Gram form (in place)."""
    K = len(c)
    g = G @ theta
    trace = np.empty(max_sweeps + 1)
    trace[0] = _objective(G, c, yy, theta, g, lam, a)
    sweeps = 0
    converged = False
    while sweeps < max_sweeps:
        maxdelta = 0.0
        for j in range(K):
            gjj = G[j, j]
            if gjj <= 0.0:
                continue
            zj = c[j] - g[j] + gjj * theta[j]
            new = scad_univariate_update(2.0 * zj, 2.0 * gjj, lam[j], a)
            delta = new - theta[j]
            if delta != 0.0:
                for k in range(K):
                    g[k] += G[k, j] * delta
                theta[j] = new
                if abs(delta) > maxdelta:
                    maxdelta = abs(delta)
        sweeps += 1
        trace[sweeps] = _objective(G, c, yy, theta, g, lam, a)
        if maxdelta < tol:
            converged = True
            break
    return theta, trace[: sweeps + 1], sweeps, converged


@njit(cache=True)
def _chol_solve(A, b):
    """Solve SPD ``A x = b`` by Jacobi-scaled Cholesky; ok=False when singular."""
    n = len(b)
    x = np.zeros(n)
    if n == 0:
        return x, True
    s = np.empty(n)
    for i in range(n):
        if A[i, i] <= 0.0:
            return x, False
        s[i] = 1.0 / np.sqrt(A[i, i])
    L = np.zeros((n, n))
    for j in range(n):
        acc = A[j, j] * s[j] * s[j]
        for k in range(j):
            acc -= L[j, k] * L[j, k]
        if acc <= 1e-11:
            return x, False
        L[j, j] = np.sqrt(acc)
        for i in range(j + 1, n):
            acc2 = A[i, j] * s[i] * s[j]
            for k in range(j):
                acc2 -= L[i, k] * L[j, k]
            L[i, j] = acc2 / L[j, j]
    w = np.empty(n)
    for i in range(n):
        acc = b[i] * s[i]
        for k in range(i):
            acc -= L[i, k] * w[k]
        w[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = w[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * x[k]
        x[i] = acc / L[i, i]
    for i in range(n):
        x[i] *= s[i]
    return x, True


@njit(cache=True)
def _cv_path(G, c, yy, lam_scale, lam2_path, a, tol, max_sweeps, colidx, always,
             gram_tr, xty_tr, D_te, y_te):
    """Fit a warm-started lambda path on one training fold and score the
    refit (OLS on the selected columns) on the held-out rows."""
    nl = len(lam2_path)
    K = len(c)
    errs = np.full(nl, np.nan)
    conv = np.zeros(nl, dtype=np.bool_)
    nsel = np.zeros(nl, dtype=np.int64)
    theta = np.zeros(K)
    lam = np.empty(K)
    Kfull = gram_tr.shape[0]
    for li in range(nl):
        for j in range(K):
            lam[j] = lam2_path[li] * lam_scale[j]
        theta, _, _, ok = _cd(G, c, yy, lam, a, theta, tol, max_sweeps)
        conv[li] = ok
        use = always.copy()
        for j in range(K):
            if theta[j] != 0.0 and G[j, j] > 0.0:
                use[colidx[j]] = True
        idx = np.empty(Kfull, dtype=np.int64)
        p = 0
        for j in range(Kfull):
            if use[j]:
                idx[p] = j
                p += 1
        idx = idx[:p]
        nsel[li] = p
        sub = np.empty((p, p))
        rhs = np.empty(p)
        for u in range(p):
            rhs[u] = xty_tr[idx[u]]
            for v in range(p):
                sub[u, v] = gram_tr[idx[u], idx[v]]
        beta, solved = _chol_solve(sub, rhs)
        if not solved:
            continue
        sse = 0.0
        for i in range(len(y_te)):
            pred = 0.0
            for u in range(p):
                pred += D_te[i, idx[u]] * beta[u]
            r = y_te[i] - pred
            sse += r * r
        errs[li] = sse / len(y_te)
    return errs, conv, nsel


@dataclass(frozen=True)
class PenaltyConfig:
    """Penalty levels and solver controls.

    ``exempt`` lists column groups that are never penalized; the intercept is
    always exempt.
    """

    lambda1: float = 0.0
    lambda2: float = 0.0
    a: float = 3.7
    exempt: frozenset = frozenset({INTERCEPT, TREATMENT})
    tol: float = 1e-7
    max_sweeps: int = 10000
    n_starts: int = 3

    def __post_init__(self):
        _check_a(self.a)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("penalty levels must be non-negative")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_sweeps < 1 or self.n_starts < 1:
            raise ValueError("max_sweeps and n_starts must be positive")
        object.__setattr__(self, "exempt", frozenset(self.exempt) | {INTERCEPT})

    def with_lambdas(self, lambda1, lambda2) -> "PenaltyConfig":
        return PenaltyConfig(float(lambda1), float(lambda2), self.a, self.exempt, self.tol,
                             self.max_sweeps, self.n_starts)


def column_penalties(groups, lambda1, lambda2, exempt) -> np.ndarray:
    """Per-column penalty level for a sequence of group labels."""
    out = np.zeros(len(groups))
    for j, g in enumerate(groups):
        if g in exempt or g == INTERCEPT:
            continue
        out[j] = lambda2 if g == BIAS else lambda1
    return out


@dataclass
class FitResult:
    theta: np.ndarray
    active_beta: tuple
    active_delta: tuple
    objective_trace: np.ndarray
    converged: bool
    n_sweeps: int
    lambda1: float = 0.0
    lambda2: float = 0.0

    @property
    def objective(self) -> float:
        return float(self.objective_trace[-1])

    def to_dict(self) -> dict:
        return {
            "theta": [float(v) for v in self.theta],
            "active_beta": [int(j) for j in self.active_beta],
            "active_delta": [int(j) for j in self.active_delta],
            "objective_trace": [float(v) for v in self.objective_trace],
            "converged": bool(self.converged),
            "n_sweeps": int(self.n_sweeps),
            "lambda1": float(self.lambda1),
            "lambda2": float(self.lambda2),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "FitResult":
        return cls(np.asarray(d["theta"], float), tuple(d["active_beta"]), tuple(d["active_delta"]),
                   np.asarray(d["objective_trace"], float), d["converged"], d["n_sweeps"],
                   d.get("lambda1", 0.0), d.get("lambda2", 0.0))


class _Standardized:
    """Centred/scaled Gram statistics of the non-intercept columns."""

    def __init__(self, D: DesignMatrix, y, rows=None):
        M = D.M if rows is None else D.M[rows]
        y = np.asarray(y, dtype=float) if rows is None else np.asarray(y, dtype=float)[rows]
        icpt = D.columns(INTERCEPT)
        if icpt.size != 1:
            raise ValueError("design must contain exactly one intercept column")
        self.icpt = int(icpt[0])
        self.cols = np.array([j for j in range(D.K) if j != self.icpt], dtype=np.int64)
        N = len(y)
        X = M[:, self.cols]
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.degenerate = ~(sd > 1e-12 * np.maximum(1.0, np.abs(self.mean)))
        sd[self.degenerate] = 1.0
        self.sd = sd
        Z = (X - self.mean) / sd
        Z[:, self.degenerate] = 0.0
        self.ybar = y.mean()
        yc = y - self.ybar
        self.G = Z.T @ Z / N
        self.c = Z.T @ yc / N
        self.yy = float(yc @ yc / N)
        self.N = N
        self.groups = tuple(D.groups[j] for j in self.cols)

    def lam(self, cfg: PenaltyConfig):
        return column_penalties(self.groups, cfg.lambda1, cfg.lambda2, cfg.exempt)

    def to_original(self, theta_std, K):
        theta = np.zeros(K)
        b = np.where(self.degenerate, 0.0, theta_std / self.sd)
        theta[self.cols] = b
        theta[self.icpt] = self.ybar - b @ self.mean
        return theta


def penalized_objective(D: DesignMatrix, y, theta, cfg: PenaltyConfig) -> float:
    """Objective value at original-scale coefficients ``theta``."""
    y = np.asarray(y, dtype=float)
    st = _Standardized(D, y)
    r = y - D.M @ theta
    lam = st.lam(cfg)
    tstd = np.abs(np.asarray(theta)[st.cols] * st.sd)
    pen = sum(float(scad_value(t, l, cfg.a)) for t, l in zip(tstd, lam) if l > 0)
    return float(r @ r + st.N * pen)


def _starts(st: _Standardized, lam, n_starts):
    K = len(st.c)
    yield np.zeros(K)
    if n_starts >= 2:
        alpha = max(float(np.mean(lam)), 1e-3)
        G = st.G + alpha * np.eye(K)
        G[st.degenerate, :] = 0.0
        G[:, st.degenerate] = 0.0
        G[st.degenerate, st.degenerate] = 1.0
        yield np.linalg.solve(G, np.where(st.degenerate, 0.0, st.c))
    for s in range(2, n_starts):
        rng = np.random.Generator(np.random.Philox(key=s))
        yield np.where(st.degenerate, 0.0, rng.normal(scale=0.01, size=K))


def _polish(st: _Standardized, lam, a, th, obj):
    """Solve the stationarity equations exactly on the current support.

    With the support, signs and SCAD pieces fixed the conditions are linear.
    The solution is kept only if it stays in the same pieces and does not
    raise the objective.
    """
    act = np.flatnonzero((th != 0.0) & ~st.degenerate)
    if act.size == 0:
        return th, obj
    t = np.abs(th[act])
    s = np.sign(th[act])
    lam_a = lam[act]
    piece = np.where(lam_a <= 0, 3, np.where(t <= lam_a, 1, np.where(t <= a * lam_a, 2, 3)))
    H = 2.0 * st.G[np.ix_(act, act)]
    rhs = 2.0 * st.c[act]
    r1, r2 = piece == 1, piece == 2
    rhs[r1] -= lam_a[r1] * s[r1]
    H[r2, r2] -= 1.0 / (a - 1.0)
    rhs[r2] -= a * lam_a[r2] * s[r2] / (a - 1.0)
    try:
        sol = np.linalg.solve(H, rhs)
    except np.linalg.LinAlgError:
        return th, obj
    ts = np.abs(sol)
    new_piece = np.where(lam_a <= 0, 3, np.where(ts <= lam_a, 1, np.where(ts <= a * lam_a, 2, 3)))
    if np.any(np.sign(sol) != s) or np.any(new_piece != piece):
        return th, obj
    cand = th.copy()
    cand[act] = sol
    new_obj = _objective(st.G, st.c, st.yy, cand, st.G @ cand, lam, a)
    if new_obj <= obj:
        return cand, new_obj
    return th, obj


def fit_penalized_ls(D: DesignMatrix, y, cfg: PenaltyConfig, init=None) -> FitResult:
    """Minimize the double-SCAD least-squares objective by coordinate descent.

    Runs from ``cfg.n_starts`` starting points (zeros, a ridge solution, then
    small deterministic jitters) and keeps the lowest final objective.
    ``init`` (original scale) replaces the start list when given.
    """
    y = np.asarray(y, dtype=float)
    if len(y) != D.M.shape[0]:
        raise ValueError("design and response have different row counts")
    st = _Standardized(D, y)
    lam = st.lam(cfg)
    lam = np.where(st.degenerate, 0.0, lam)
    if init is not None:
        starts = [np.where(st.degenerate, 0.0, np.asarray(init, float)[st.cols] * st.sd)]
    else:
        starts = list(_starts(st, lam, cfg.n_starts))
    best = None
    for th0 in starts:
        th, trace, sweeps, ok = _cd(st.G, st.c, st.yy, lam, float(cfg.a), th0.copy(),
                                    float(cfg.tol), int(cfg.max_sweeps))
        if best is None or trace[-1] < best[1][-1]:
            best = (th, trace, sweeps, ok)
    th, trace, sweeps, ok = best
    if ok:
        th, obj = _polish(st, lam, float(cfg.a), th, trace[-1])
        if obj < trace[-1]:
            trace = np.append(trace, obj)
    theta = st.to_original(th, D.K)
    nz = [int(st.cols[j]) for j in range(len(th)) if th[j] != 0.0 and not st.degenerate[j]]
    active_beta = tuple(sorted({st.icpt} | {j for j in nz if D.groups[j] != BIAS}))
    active_delta = tuple(j for j in nz if D.groups[j] == BIAS)
    return FitResult(theta, active_beta, active_delta, trace * st.N, bool(ok), int(sweeps),
                     cfg.lambda1, cfg.lambda2)


def refit_ols(D: DesignMatrix, y, active):
    """Ordinary least squares on the ``active`` columns.

    Returns ``(theta, cov, sigma2)``; ``theta`` and ``cov`` are full size
    with zeros for inactive columns and ``sigma2 = RSS / (N - |active|)``.
    """
    y = np.asarray(y, dtype=float)
    active = np.array(sorted(set(int(j) for j in active)), dtype=np.int64)
    Da = D.M[:, active]
    N, p = Da.shape
    if N <= p:
        raise RankDeficiencyError(f"{p} active columns but only {N} rows")
    Q, R = np.linalg.qr(Da)
    diag = np.abs(np.diag(R))
    scale = np.linalg.norm(Da, axis=0)
    bad = np.flatnonzero(diag <= 1e-10 * np.maximum(scale, 1e-300))
    if bad.size:
        names = ", ".join(D.names[active[j]] for j in bad)
        raise RankDeficiencyError(f"active design is rank deficient; collinear columns: {names}")
    b = np.linalg.solve(R, Q.T @ y)
    resid = y - Da @ b
    sigma2 = float(resid @ resid / (N - p))
    Rinv = np.linalg.solve(R, np.eye(p))
    cov_a = sigma2 * (Rinv @ Rinv.T)
    theta = np.zeros(D.K)
    theta[active] = b
    cov = np.zeros((D.K, D.K))
    cov[np.ix_(active, active)] = cov_a
    return theta, cov, sigma2
