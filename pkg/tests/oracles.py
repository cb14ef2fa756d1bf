"""Reference computations that share no code with the package."""
import itertools

import numpy as np
from scipy import integrate, optimize


def scad_deriv_ref(t, lam, a):
    # lam * { 1(t <= lam) + (a lam - t)_+ / ((a - 1) lam) 1(t > lam) }
    if t <= lam:
        return lam
    return max(a * lam - t, 0.0) / (a - 1)


def scad_value_ref(t, lam, a):
    """Penalty by adaptive quadrature of the derivative."""
    pts = [p for p in (lam, a * lam) if 0 < p < t]
    val, _ = integrate.quad(scad_deriv_ref, 0.0, t, args=(lam, a), points=pts or None, limit=200)
    return val


def univariate_ref(z, v, lam, a):
    """Brute-force minimizer of 0.5 v t^2 - z t + P(|t|), refined locally."""
    f = lambda t: 0.5 * v * t * t - z * t + scad_value_ref(abs(t), lam, a)  # noqa: E731
    span = abs(z) / v * 1.5 + a * lam + 1.0
    grid = np.linspace(-span, span, 4001)
    vals = np.array([f(t) for t in grid])
    k = int(np.argmin(vals))
    lo, hi = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(f, bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
    best = min([(res.fun, res.x), (f(0.0), 0.0)])
    return best[1], best[0]


def _scad_vec(t, lam, a):
    t = np.abs(t)
    mid = (2 * a * lam * t - t * t - lam * lam) / (2 * (a - 1))
    return np.where(t <= lam, lam * t, np.where(t <= a * lam, mid, lam * lam * (a + 1) / 2))


def objective_std(Z, yc, lam, a, B):
    """Per-row objectives for standardized coefficients ``B`` (rows are candidates).

    Sum of squares plus N times the SCAD penalties; the intercept has been
    profiled out by centring.
    """
    N = len(yc)
    R = yc[None, :] - B @ Z.T
    pen = sum(np.where(l > 0, _scad_vec(B[:, j], l, a), 0.0) for j, l in enumerate(lam))
    return (R * R).sum(axis=1) + N * pen


def grid_oracle(X, y, lam, a, step=0.1, bound=2.0, refine=5):
    """Grid search over standardized coefficients followed by local polish.

    Returns the best objective found (sum of squares scale).
    """
    Xc = X - X.mean(axis=0)
    sd = Xc.std(axis=0)
    Z = Xc / sd
    yc = y - y.mean()
    K = Z.shape[1]
    axis = np.arange(-bound, bound + 1e-12, step)
    best = []
    chunk = max(1, 200000 // len(axis))
    combos = itertools.product(axis, repeat=K - 1) if K > 1 else [()]
    buf = []

    def flush():
        heads = np.array(buf)
        B = np.column_stack([np.repeat(heads, len(axis), axis=0),
                             np.tile(axis, len(heads))]) if K > 1 else axis[:, None]
        vals = objective_std(Z, yc, lam, a, B)
        idx = np.argsort(vals)[:refine]
        best.extend((vals[i], B[i]) for i in idx)
        buf.clear()

    for head in combos:
        buf.append(head)
        if len(buf) >= chunk:
            flush()
    if buf or K == 1:
        flush()
    best.sort(key=lambda p: p[0])
    f = lambda b: float(objective_std(Z, yc, lam, a, b[None, :])[0])  # noqa: E731
    out = best[0][0]
    for _, b0 in best[:refine]:
        res = optimize.minimize(f, b0, method="Nelder-Mead",
                                options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 20000})
        out = min(out, res.fun)
    return out
