"""Simulation studies, the Monte Carlo driver and report files.

Study 1 is coefficient recovery in a pure linear regression with 50
covariates; Study 2 is treatment-effect recovery with two covariates and a
nonlinear external-control bias.  Every replicate draws from its own Philox
stream keyed by ``base_seed ^ r``, so results do not depend on execution
order or on the number of workers.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Callable

import numpy as np

from .basis import BIAS, MU, BasisSpec, assemble_design, power_basis
from .data import Dataset, atomic_write_text
from .errors import DPIEError
from .estimators import ATEResult, bpp_estimate, dpie, mba_estimate, penalized_pipeline, re_design, re_only, spie
from .scad import PenaltyConfig
from .tuning import CVPlan, cv_select

__all__ = [
    "Study1Spec",
    "Study2Spec",
    "Truth",
    "CoefEstimate",
    "MCMetrics",
    "STUDY1_D",
    "study1_truth",
    "gen_study1",
    "gen_study2",
    "study2_outcome",
    "study2_bias_function",
    "run_monte_carlo",
    "run_sweep",
    "emit_report",
    "load_report",
    "SCHEMA_VERSION",
    "RNG_NAME",
]

SCHEMA_VERSION = 1
RNG_NAME = f"numpy Philox4x64-10 (numpy {np.__version__}), replicate key = base_seed ^ r"
STUDY1_D = 50
_S3 = math.sqrt(3.0)


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=int(seed) & (2**64 - 1)))


@dataclass(frozen=True)
class Truth:
    tau: float | None = None
    beta0: np.ndarray | None = None
    delta0: np.ndarray | None = None


@dataclass(frozen=True)
class Study1Spec:
    """Linear model ``Y = X'beta0 + (1-S) X'delta0 + eps`` with 50 covariates.

    ``delta0`` has zeros in its last ``ceil(50 * zero_fraction_delta)``
    positions; the remaining entries are proportional to ``1, 2, ...`` and
    scaled so that ``||delta0||_1 = c * ||beta0||_1``.
    """

    n: int = 1000
    m: int = 1000
    c: float = 1.0
    zero_fraction_delta: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be positive")
        if self.c < 0:
            raise ValueError("c must be nonnegative")
        if not 0 <= self.zero_fraction_delta <= 1:
            raise ValueError("zero_fraction_delta must lie in [0, 1]")

    @property
    def n_zero(self) -> int:
        # guard against 50 * 0.06 = 3.0000000000000004
        return int(math.ceil(STUDY1_D * self.zero_fraction_delta - 1e-9))


@dataclass(frozen=True)
class Study2Spec:
    """Two covariates, randomized treatment, tau = 2.

    S1: ``Y = -1.5 X1^2 - 1.5 X2 + 2A + (1-S)(10 X1^2 + 4 X2^3) + eps``;
    S2 replaces ``-1.5 X2`` by ``-1.5 exp(X2)``.
    """

    setting: str = "S1"
    n: int = 1000
    m: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.setting not in ("S1", "S2"):
            raise ValueError(f"setting must be S1 or S2, got {self.setting!r}")
        if self.n < 1 or self.m < 1:
            raise ValueError("n and m must be positive")


def study1_truth(spec: Study1Spec):
    """``(beta0, delta0)`` for a Study 1 case."""
    beta0 = np.arange(1, STUDY1_D + 1) / STUDY1_D
    delta0 = np.zeros(STUDY1_D)
    k = STUDY1_D - spec.n_zero
    if spec.c > 0:
        if k == 0:
            raise ValueError("delta0 cannot be all zero with a positive magnitude ratio")
        w = np.arange(1, k + 1, dtype=float)
        delta0[:k] = w * (spec.c * beta0.sum() / w.sum())
    return beta0, delta0


def gen_study1(spec: Study1Spec):
    """Draw a Study 1 dataset; returns ``(Dataset, beta0, delta0)``.

    Draw order: covariates (row-major), then noise.  Rows ``0..n-1`` are the
    experiment; there is no treatment (``A`` is all zero).
    """
    beta0, delta0 = study1_truth(spec)
    N = spec.n + spec.m
    rng = _rng(spec.seed)
    X = rng.uniform(1 - _S3, 1 + _S3, size=(N, STUDY1_D))
    eps = rng.standard_normal(N)
    S = np.r_[np.ones(spec.n), np.zeros(spec.m)]
    Y = X @ beta0 + (1 - S) * (X @ delta0) + eps
    names = tuple(f"x{j + 1}" for j in range(STUDY1_D))
    return Dataset(X, np.zeros(N), Y, S, names), beta0, delta0


def study2_outcome(X, A, S, setting="S1"):
    """Noise-free Study 2 outcome."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    x1, x2 = X[:, 0], X[:, 1]
    lin = -1.5 * x2 if setting == "S1" else -1.5 * np.exp(x2)
    return -1.5 * x1**2 + lin + 2.0 * np.asarray(A) + (1 - np.asarray(S)) * (10 * x1**2 + 4 * x2**3)


def gen_study2(spec: Study2Spec):
    """Draw a Study 2 dataset; returns ``(Dataset, 2.0)``.

    Draw order: covariates, treatment uniforms for the experiment rows, noise.
    """
    N = spec.n + spec.m
    rng = _rng(spec.seed)
    X = rng.uniform(-1.5, 1.5, size=(N, 2))
    A = np.r_[(rng.random(spec.n) < 0.5).astype(float), np.zeros(spec.m)]
    eps = rng.standard_normal(N)
    S = np.r_[np.ones(spec.n), np.zeros(spec.m)]
    Y = study2_outcome(X, A, S, spec.setting) + eps
    return Dataset(X, A, Y, S, ("x1", "x2")), 2.0


def study2_bias_function(setting="S1", mu_spec: BasisSpec = BasisSpec(), n_nodes=40):
    """True bias function ``b0(X)`` relative to the working model.

    ``b0`` is the external-control mean minus the best approximation of the
    experiment's control mean in ``span{1, p_mu}`` under the uniform
    covariate law, computed with a tensor Gauss-Legendre rule.
    """
    t, w = np.polynomial.legendre.leggauss(n_nodes)
    x = 1.5 * t
    g1, g2 = np.meshgrid(x, x, indexing="ij")
    nodes = np.column_stack([g1.ravel(), g2.ravel()])
    weights = np.outer(w, w).ravel()
    B = np.column_stack([np.ones(len(nodes)), power_basis(nodes, mu_spec)])
    m0 = study2_outcome(nodes, 0.0, 1.0, setting)
    Wsqrt = np.sqrt(weights)
    coef = np.linalg.lstsq(B * Wsqrt[:, None], m0 * Wsqrt, rcond=None)[0]

    def b0(X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Bx = np.column_stack([np.ones(len(X)), power_basis(X, mu_spec)])
        return study2_outcome(X, 0.0, 0.0, setting) - Bx @ coef

    return b0


# --------------------------------------------------------------------------
# Methods
# --------------------------------------------------------------------------

@dataclass
class CoefEstimate:
    """Coefficient-recovery output of one method on one Study 1 replicate."""

    beta_hat: np.ndarray
    selected_beta: np.ndarray
    selected_delta: np.ndarray | None = None
    converged: bool = True


def _coef_from(pf, n_beta) -> CoefEstimate:
    mu = pf.design.columns(MU)
    bias = pf.design.columns(BIAS)
    if mu.size != n_beta:
        raise ValueError("design does not have one outcome-model column per covariate")
    act = np.zeros(pf.design.K, dtype=bool)
    act[list(pf.active)] = True
    return CoefEstimate(pf.theta[mu].copy(), act[mu], act[bias] if bias.size else None, pf.fit.converged)


def _study1_methods(names, plan, cfg):
    """Evaluate the requested built-in Study 1 methods, sharing one
    cross-validation run between DPIE and SPIE when possible."""
    lin = BasisSpec(1)

    def run(ds, truth):
        out = {}
        need = [n for n in names if n in ("DPIE", "SPIE")]
        if need:
            D = assemble_design(ds, lin, lin, include_treatment=False)
            shared = "DPIE" in need and 1.0 in plan.sc_grid
            cv = cv_select(D, ds.Y, ds, plan, cfg) if "DPIE" in need else None
            if "DPIE" in need:
                out["DPIE"] = _coef_from(penalized_pipeline(D, ds.Y, ds, plan, cfg, cv=cv), STUDY1_D)
            if "SPIE" in need:
                p1 = plan.replace(sc_grid=(1.0,))
                cv1 = cv.restrict([1.0]) if shared else None
                out["SPIE"] = _coef_from(penalized_pipeline(D, ds.Y, ds, p1, cfg, cv=cv1), STUDY1_D)
        if "RE" in names:
            re, D = re_design(ds, lin, include_treatment=False)
            pf = penalized_pipeline(D, re.Y, re, plan.replace(sc_grid=(1.0,)), cfg)
            out["RE"] = _coef_from(pf, STUDY1_D)
        return out

    return run


def _study2_methods(names, plan, cfg, mu_spec, b_spec):
    table = {
        "DPIE": lambda ds: dpie(ds, mu_spec, b_spec, plan, cfg),
        "SPIE": lambda ds: spie(ds, mu_spec, b_spec, plan, cfg),
        "RE": lambda ds: re_only(ds, mu_spec, plan, cfg),
        "MBA": lambda ds: mba_estimate(ds),
        "BPP": lambda ds: bpp_estimate(ds, mu_spec, mu_spec),
    }

    def run(ds, truth):
        return {n: table[n](ds) for n in names}

    return run


_STUDY1_NAMES = ("DPIE", "SPIE", "RE")
_STUDY2_NAMES = ("DPIE", "SPIE", "RE", "MBA", "BPP")


def _generate(spec, seed):
    spec = replace(spec, seed=seed)
    if isinstance(spec, Study1Spec):
        ds, b, d = gen_study1(spec)
        return ds, Truth(None, b, d)
    if isinstance(spec, Study2Spec):
        ds, tau = gen_study2(spec)
        return ds, Truth(tau)
    raise TypeError(f"unknown study spec {type(spec).__name__}")


def _replicate(spec, r, base_seed, builtin, custom):
    ds, truth = _generate(spec, int(base_seed) ^ int(r))
    out = {}
    try:
        out.update(builtin(ds, truth))
    except (DPIEError, np.linalg.LinAlgError) as exc:
        # fall back to one method at a time so a failure stays local
        for name in builtin.names:
            try:
                out.update(builtin.single(name)(ds, truth))
            except (DPIEError, np.linalg.LinAlgError) as exc2:
                out[name] = exc2
    for name, fn in custom:
        try:
            out[name] = fn(ds, truth)
        except (DPIEError, np.linalg.LinAlgError) as exc:
            out[name] = exc
    return _summarize(out, truth)


class _Builtin:
    def __init__(self, spec, names, plan, cfg, mu_spec, b_spec):
        self.names = tuple(names)
        self._args = (spec, plan, cfg, mu_spec, b_spec)
        self._fn = self._make(self.names)

    def _make(self, names):
        spec, plan, cfg, mu_spec, b_spec = self._args
        if not names:
            return lambda ds, truth: {}
        if isinstance(spec, Study1Spec):
            return _study1_methods(names, plan, cfg)
        return _study2_methods(names, plan, cfg, mu_spec, b_spec)

    def single(self, name):
        return self._make((name,))

    def __call__(self, ds, truth):
        return self._fn(ds, truth)


def _summarize(out, truth: Truth):
    """Reduce each method's output to the numbers the metrics need."""
    rec = {}
    for name, res in out.items():
        if isinstance(res, Exception):
            rec[name] = {"ok": False, "error": f"{type(res).__name__}: {res}"}
            continue
        r = {"ok": bool(getattr(res, "converged", True))}
        if isinstance(res, ATEResult):
            r.update(tau=res.tau_hat, se=res.se,
                     covered=None if truth.tau is None else bool(res.covers(truth.tau)))
        elif isinstance(res, CoefEstimate):
            b0 = truth.beta0
            r["mse_beta"] = float(np.sqrt(np.mean((np.asarray(res.beta_hat) - b0) ** 2)))
            true_b = b0 != 0
            sel_b = np.asarray(res.selected_beta, dtype=bool)
            over = np.any(sel_b & ~true_b)
            under = np.any(~sel_b & true_b)
            exact = np.array_equal(sel_b, true_b)
            if res.selected_delta is not None:
                true_d = truth.delta0 != 0
                sel_d = np.asarray(res.selected_delta, dtype=bool)
                over |= np.any(sel_d & ~true_d)
                under |= np.any(~sel_d & true_d)
                exact &= np.array_equal(sel_d, true_d)
            r.update(over=bool(over), under=bool(under), exact=bool(exact))
        else:
            raise TypeError(f"method {name} returned {type(res).__name__}")
        rec[name] = r
    return rec


@dataclass
class MCMetrics:
    """Monte Carlo summary of one method.

    Averages run over the ``n_ok`` successful replicates; ``T`` is the
    number requested.  ``true_var`` uses the ``n_ok - 1`` divisor, so
    ``mse_tau = true_var * (n_ok - 1) / n_ok + (mean - tau)^2``.  Fields that
    do not apply to the study are ``None``.
    """

    method: str
    T: int
    n_ok: int
    n_failed: int
    valid: bool
    abs_bias: float | None = None
    true_var: float | None = None
    mse_tau: float | None = None
    mean_est_var: float | None = None
    coverage: float | None = None
    mse_beta: float | None = None
    pct_over_select: float | None = None
    pct_under_select: float | None = None
    pct_exact_support: float | None = None
    mean_tau: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "MCMetrics":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def _aggregate(name, recs, T, tau) -> MCMetrics:
    ok = [r for r in recs if r.get("ok")]
    n_ok = len(ok)
    m = MCMetrics(name, T, n_ok, T - n_ok, valid=(T - n_ok) <= 0.1 * T)
    if not n_ok:
        return m
    if "tau" in ok[0]:
        est = np.array([r["tau"] for r in ok])
        se = np.array([r["se"] for r in ok])
        m.mean_tau = float(est.mean())
        m.true_var = float(est.var(ddof=1)) if n_ok > 1 else float("nan")
        m.mean_est_var = float(np.mean(se**2))
        if tau is not None:
            m.abs_bias = float(abs(est.mean() - tau))
            m.mse_tau = float(np.mean((est - tau) ** 2))
            m.coverage = float(np.mean([r["covered"] for r in ok]))
    if "mse_beta" in ok[0]:
        m.mse_beta = float(np.mean([r["mse_beta"] for r in ok]))
        m.pct_over_select = float(np.mean([r["over"] for r in ok]))
        m.pct_under_select = float(np.mean([r["under"] for r in ok]))
        m.pct_exact_support = float(np.mean([r["exact"] for r in ok]))
    return m


def run_monte_carlo(spec, methods, T: int, base_seed: int = 0, *, plan: CVPlan = CVPlan(),
                    cfg: PenaltyConfig = PenaltyConfig(), mu_spec: BasisSpec = BasisSpec(),
                    b_spec: BasisSpec = BasisSpec(), n_jobs: int = 1, return_records=False):
    """Run ``T`` replicates of a study and summarize every method.

    Parameters
    ----------
    spec : Study1Spec or Study2Spec
        Its ``seed`` is ignored; replicate ``r`` uses ``base_seed ^ r``.
    methods : sequence
        Built-in names (``DPIE``, ``SPIE``, ``RE`` for both studies, plus
        ``MBA`` and ``BPP`` for Study 2) or ``(name, callable)`` pairs.  A
        callable receives ``(Dataset, Truth)`` and returns an
        :class:`ATEResult` or a :class:`CoefEstimate`.
    T : int
        Number of replicates, at least 2.
    plan, cfg, mu_spec, b_spec
        Tuning and basis settings for the built-in estimators.  Study 1
        always uses linear bases.
    n_jobs : int
        Worker processes; results do not depend on it.

    Returns
    -------
    dict
        Method name to :class:`MCMetrics`, in the order given; with
        ``return_records`` also the per-replicate records.
    """
    if int(T) != T or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not methods:
        raise ValueError("no methods given")
    allowed = _STUDY1_NAMES if isinstance(spec, Study1Spec) else _STUDY2_NAMES
    names, custom, order = [], [], []
    for m in methods:
        if isinstance(m, str):
            if m not in allowed:
                raise ValueError(f"unknown method {m!r} for {type(spec).__name__}; choose from {allowed}")
            names.append(m)
            order.append(m)
        else:
            name, fn = m
            custom.append((str(name), fn))
            order.append(str(name))
    if len(set(order)) != len(order):
        raise ValueError("duplicate method names")
    builtin = _Builtin(spec, names, plan, cfg, mu_spec, b_spec)
    if n_jobs == 1:
        recs = [_replicate(spec, r, base_seed, builtin, custom) for r in range(T)]
    else:
        from joblib import Parallel, delayed

        recs = Parallel(n_jobs=n_jobs)(delayed(_replicate)(spec, r, base_seed, builtin, custom)
                                       for r in range(T))
    tau = 2.0 if isinstance(spec, Study2Spec) else None
    metrics = {name: _aggregate(name, [rec[name] for rec in recs], T, tau) for name in order}
    return (metrics, recs) if return_records else metrics


def run_sweep(make_spec: Callable, xs, methods, T, base_seed=0, **kw):
    """``run_monte_carlo`` at each sweep value; returns ``{x: metrics}``."""
    return {float(x): run_monte_carlo(make_spec(x), methods, T, base_seed, **kw) for x in xs}


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------

_FIELDS = [f.name for f in fields(MCMetrics)]
_PLOT_METRICS = ("mse_beta", "pct_over_select", "pct_under_select", "pct_exact_support",
                 "abs_bias", "true_var", "mse_tau", "coverage")


def _rows(results):
    """Flatten ``{method: MCMetrics}`` or ``{x: {method: MCMetrics}}``."""
    if not results:
        raise ValueError("no metrics to report")
    first = next(iter(results.values()))
    if isinstance(first, MCMetrics):
        return [(None, m) for m in results.values()]
    return [(float(x), m) for x, per in results.items() for m in per.values()]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_report(results, fmt: str, out_dir, stem: str = "report", x_name: str = "x", meta=None) -> list:
    """Write ``csv``, ``json`` or ``plotdata`` report files; returns their paths.

    ``plotdata`` writes one two-column ``x value`` file per method and metric
    and needs a sweep (``{x: {method: MCMetrics}}``).
    """
    import os

    rows = _rows(results)
    sweep = rows[0][0] is not None
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if fmt == "csv":
        buf = io.StringIO()
        head = ([x_name] if sweep else []) + _FIELDS
        buf.write(",".join(head) + "\n")
        for x, m in rows:
            vals = ([_fmt(x)] if sweep else []) + [_fmt(getattr(m, f)) for f in _FIELDS]
            buf.write(",".join(vals) + "\n")
        paths.append(os.path.join(out_dir, f"{stem}.csv"))
        atomic_write_text(paths[-1], buf.getvalue())
    elif fmt == "json":
        doc = {
            "schema_version": SCHEMA_VERSION,
            "rng": RNG_NAME,
            "x_name": x_name if sweep else None,
            "meta": meta or {},
            "results": [{"x": x, "metrics": m.to_dict()} for x, m in rows],
        }
        paths.append(os.path.join(out_dir, f"{stem}.json"))
        atomic_write_text(paths[-1], json.dumps(doc, indent=2, sort_keys=True) + "\n")
    elif fmt == "plotdata":
        if not sweep:
            raise ValueError("plotdata needs a sweep of results keyed by x")
        methods = list(dict.fromkeys(m.method for _, m in rows))
        for method in methods:
            pts = [(x, m) for x, m in rows if m.method == method]
            for metric in _PLOT_METRICS:
                if all(getattr(m, metric) is None for _, m in pts):
                    continue
                buf = io.StringIO()
                buf.write(f"# {x_name} {metric}\n")
                for x, m in pts:
                    v = getattr(m, metric)
                    buf.write(f"{x!r} {'nan' if v is None else repr(float(v))}\n")
                paths.append(os.path.join(out_dir, f"{stem}_{metric}_{method}.dat"))
                atomic_write_text(paths[-1], buf.getvalue())
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return paths


def load_report(path):
    """Read a JSON report back into ``{method: MCMetrics}`` or a sweep."""
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {doc.get('schema_version')!r}")
    out: dict = {}
    for row in doc["results"]:
        m = MCMetrics.from_dict(row["metrics"])
        if row["x"] is None:
            out[m.method] = m
        else:
            out.setdefault(float(row["x"]), {})[m.method] = m
    return out
