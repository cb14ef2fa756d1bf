"""Average-treatment-effect estimators.

``dpie`` (two penalty levels), ``spie`` (one shared level) and ``re_only``
(experiment rows only) share one pipeline: assemble the design, choose the
penalty by cross-validation, fit, refit OLS on the selected columns and read
off the treatment coefficient.  ``mba_estimate`` and ``bpp_estimate`` are
the comparison baselines.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .basis import BIAS, INTERCEPT, MU, TREATMENT, BasisSpec, DesignMatrix, assemble_design, power_basis
from .data import Dataset, MatchSpec, distance_matrix, greedy_match
from .errors import EstimationError, MatchError, RankDeficiencyError, ValidityError
from .scad import FitResult, PenaltyConfig, fit_penalized_ls, refit_ols
from .tuning import CVPlan, CVResult, cv_select

__all__ = [
    "ATEResult",
    "VarianceReport",
    "PenalizedFit",
    "Z975",
    "penalized_pipeline",
    "dpie",
    "spie",
    "re_only",
    "plugin_variance",
    "mba_estimate",
    "bpp_estimate",
]

Z975 = 1.959964


@dataclass
class ATEResult:
    tau_hat: float
    se: float
    ci95: tuple
    n_selected_mu: int
    n_selected_bias: int
    method: str
    lambda_used: tuple | None = None
    converged: bool = True
    notes: tuple = ()

    @classmethod
    def from_estimate(cls, tau, se, method, **kw) -> "ATEResult":
        tau, se = float(tau), float(se)
        kw.setdefault("n_selected_mu", 0)
        kw.setdefault("n_selected_bias", 0)
        return cls(tau, se, (tau - Z975 * se, tau + Z975 * se), method=method, **kw)

    def covers(self, value) -> bool:
        return self.ci95[0] <= value <= self.ci95[1]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "se": self.se,
            "ci95": list(self.ci95),
            "n_selected_mu": int(self.n_selected_mu),
            "n_selected_bias": int(self.n_selected_bias),
            "lambda_used": None if self.lambda_used is None else [float(v) for v in self.lambda_used],
            "converged": bool(self.converged),
            "notes": list(self.notes),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d) -> "ATEResult":
        lam = d.get("lambda_used")
        return cls(d["tau_hat"], d["se"], tuple(d["ci95"]), d["n_selected_mu"], d["n_selected_bias"],
                   d["method"], None if lam is None else tuple(lam), d["converged"], tuple(d.get("notes", ())))


@dataclass
class VarianceReport:
    """Plug-in variances of the treatment coefficient (finite-sample scale)."""

    v_combined: float
    v_re_only: float
    sigma2_hat: float
    pseudo_inverse: bool = False

    def to_dict(self) -> dict:
        return {"v_combined": self.v_combined, "v_re_only": self.v_re_only,
                "sigma2_hat": self.sigma2_hat, "pseudo_inverse": self.pseudo_inverse}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class PenalizedFit:
    design: DesignMatrix
    cv: CVResult
    fit: FitResult
    theta: np.ndarray
    cov: np.ndarray
    sigma2: float
    active: tuple

    def count(self, group) -> int:
        return sum(self.design.groups[j] == group for j in self.active)


def penalized_pipeline(D: DesignMatrix, y, ds: Dataset, plan: CVPlan = CVPlan(),
                       cfg: PenaltyConfig = PenaltyConfig(), cv: CVResult | None = None) -> PenalizedFit:
    """Cross-validate, fit at the chosen penalties, then refit OLS on the
    selected columns plus intercept and treatment.

    A precomputed ``cv`` skips the cross-validation step.
    """
    if cv is None:
        cv = cv_select(D, y, ds, plan, cfg)
    fit = fit_penalized_ls(D, y, cfg.with_lambdas(cv.best_lambda1, cv.best_lambda2))
    active = set(fit.active_beta) | set(fit.active_delta) | set(D.columns(INTERCEPT, TREATMENT).tolist())
    theta, cov, sigma2 = refit_ols(D, y, active)
    return PenalizedFit(D, cv, fit, theta, cov, sigma2, tuple(sorted(active)))


def _ate_from(pf: PenalizedFit, method, notes=()) -> ATEResult:
    t = pf.design.treatment_index
    if t is None:
        raise ValidityError("design has no treatment column")
    return ATEResult.from_estimate(
        pf.theta[t], np.sqrt(pf.cov[t, t]), method,
        n_selected_mu=pf.count(MU), n_selected_bias=pf.count(BIAS),
        lambda_used=(pf.cv.best_lambda1, pf.cv.best_lambda2),
        converged=pf.fit.converged, notes=tuple(notes))


def _check(ds: Dataset):
    if ds.n < 1:
        raise ValidityError("no randomized-experiment rows")
    if not np.any(ds.A[ds.S == 1] == 1):
        raise ValidityError("no treated rows in the randomized experiment")


def dpie(ds: Dataset, mu_spec: BasisSpec = BasisSpec(), b_spec: BasisSpec = BasisSpec(),
         plan: CVPlan = CVPlan(), cfg: PenaltyConfig = PenaltyConfig(), *, _method="DPIE") -> ATEResult:
    """Double-penalty integration estimate of the treatment effect.

    With no external controls this is exactly :func:`re_only` (flagged in
    ``notes``).
    """
    _check(ds)
    if ds.m == 0:
        res = re_only(ds, mu_spec, plan, cfg)
        res.method = _method
        res.notes = res.notes + ("no external controls: RE-only estimate",)
        return res
    D = assemble_design(ds, mu_spec, b_spec, include_treatment=True)
    return _ate_from(penalized_pipeline(D, ds.Y, ds, plan, cfg), _method)


def spie(ds: Dataset, mu_spec: BasisSpec = BasisSpec(), b_spec: BasisSpec = BasisSpec(),
         plan: CVPlan = CVPlan(), cfg: PenaltyConfig = PenaltyConfig()) -> ATEResult:
    """As :func:`dpie` with one shared penalty level (sc fixed at 1)."""
    return dpie(ds, mu_spec, b_spec, plan.replace(sc_grid=(1.0,)), cfg, _method="SPIE")


def re_design(ds: Dataset, mu_spec: BasisSpec, include_treatment=None):
    re = ds.re_rows()
    D = assemble_design(re, mu_spec, mu_spec, include_treatment=include_treatment).drop_groups(BIAS)
    return re, D


def re_only(ds: Dataset, mu_spec: BasisSpec = BasisSpec(), plan: CVPlan = CVPlan(),
            cfg: PenaltyConfig = PenaltyConfig()) -> ATEResult:
    """Single-penalty ANCOVA estimate using only the experiment rows."""
    _check(ds)
    re, D = re_design(ds, mu_spec, include_treatment=True)
    pf = penalized_pipeline(D, re.Y, re, plan.replace(sc_grid=(1.0,)), cfg)
    return _ate_from(pf, "RE")


def _row_space_basis(P, rtol=1e-10):
    """Orthonormal basis of the column space of ``P``; flags rank loss."""
    if P.shape[1] == 0 or P.shape[0] == 0:
        return np.zeros((P.shape[0], 0)), False
    U, s, _ = np.linalg.svd(P, full_matrices=False)
    keep = s > rtol * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    return U[:, keep], bool((~keep).any())


def _inv_diag(Z, t):
    """``[(Z'Z)^{-1}]_{tt}`` as one over the residual sum of squares of
    column ``t`` regressed on the others."""
    others = np.delete(Z, t, axis=1)
    zt = Z[:, t]
    if others.shape[1]:
        coef = np.linalg.lstsq(others, zt, rcond=None)[0]
        r = zt - others @ coef
    else:
        r = zt
    rss = float(r @ r)
    if rss <= 0:
        raise RankDeficiencyError("treatment column is collinear with the other active columns")
    return 1.0 / rss


def plugin_variance(D: DesignMatrix, y, active) -> VarianceReport:
    """Plug-in variances of the treatment coefficient with and without ECs.

    The combined variance uses the RE Gram matrix of the outcome-model
    columns plus the EC Gram matrix after projecting out the active bias
    columns (the Schur complement), which is positive semidefinite by
    construction; the RE-only variance uses the RE Gram matrix alone.  Both
    share the residual variance of the combined OLS refit.
    """
    if D.S is None:
        raise ValueError("design matrix does not carry the study indicator")
    t = D.treatment_index
    if t is None:
        raise ValidityError("design has no treatment column")
    active = sorted(set(int(j) for j in active) | set(D.columns(INTERCEPT, TREATMENT).tolist()))
    _, _, sigma2 = refit_ols(D, y, active)
    mu_idx = [j for j in active if D.groups[j] != BIAS]
    b_idx = [j for j in active if D.groups[j] == BIAS]
    re = D.S == 1
    ec = ~re
    P_re = D.M[np.ix_(re, mu_idx)]
    P_ec = D.M[np.ix_(ec, mu_idx)]
    Q, pinv = _row_space_basis(D.M[np.ix_(ec, b_idx)])
    resid_ec = P_ec - Q @ (Q.T @ P_ec)
    if np.linalg.norm(resid_ec) <= 1e-10 * max(np.linalg.norm(P_ec), 1.0):
        # the bias columns absorb every external row; they add no information
        resid_ec = resid_ec[:0]
    tt = mu_idx.index(t)
    v_re = sigma2 * _inv_diag(P_re, tt)
    v_comb = sigma2 * _inv_diag(np.vstack([P_re, resid_ec]), tt)
    return VarianceReport(float(v_comb), float(v_re), float(sigma2), pinv)


# --------------------------------------------------------------------------
# Baselines
# --------------------------------------------------------------------------

def _pairs(left_X, right_X, ref, metric):
    dist = distance_matrix(left_X, right_X, metric, reference=ref)
    return greedy_match(dist, 1, False)[:, 0]


def mba_estimate(ds: Dataset, spec: MatchSpec = MatchSpec(ratio=1)) -> ATEResult:
    """Three-stage matching with a constant EC-vs-CC bias correction.

    1. treated and concurrent controls are matched 1:1 without replacement;
    2. concurrent controls are matched 1:1 to external controls and the mean
       outcome difference is the bias estimate;
    3. treated units left over from stage 1 are matched to unused external
       controls whose outcomes are shifted by the bias estimate.

    The effect is the mean paired difference and its standard error the
    paired-difference standard error.
    """
    ct = np.flatnonzero((ds.A == 1) & (ds.S == 1))
    cc = np.flatnonzero((ds.A == 0) & (ds.S == 1))
    ec = np.flatnonzero(ds.S == 0)
    if min(ct.size, cc.size, ec.size) < 1:
        raise ValidityError(f"need treated, concurrent-control and external rows (got {ct.size}, {cc.size}, {ec.size})")
    X, Y, ref = ds.X, ds.Y, ds.X
    metric = spec.distance
    # stage 1
    if cc.size <= ct.size:
        m = ct[_pairs(X[cc], X[ct], ref, metric)]
        pairs1 = list(zip(m, cc))
    else:
        m = cc[_pairs(X[ct], X[cc], ref, metric)]
        pairs1 = list(zip(ct, m))
    matched_ct = {int(a) for a, _ in pairs1}
    left_ct = np.array([i for i in ct if int(i) not in matched_ct], dtype=np.int64)
    # stage 2
    if ec.size >= cc.size:
        m = ec[_pairs(X[cc], X[ec], ref, metric)]
        pairs2 = list(zip(m, cc))
    else:
        m = cc[_pairs(X[ec], X[cc], ref, metric)]
        pairs2 = list(zip(ec, m))
    delta = float(np.mean([Y[e] - Y[c] for e, c in pairs2]))
    # stage 3
    diffs = [Y[a] - Y[c] for a, c in pairs1]
    if left_ct.size:
        used = {int(e) for e, _ in pairs2}
        free = np.array([e for e in ec if int(e) not in used], dtype=np.int64)
        if free.size < left_ct.size:
            raise MatchError(f"stage 3 needs {left_ct.size} unused external controls, only {free.size} left")
        m = free[_pairs(X[left_ct], X[free], ref, metric)]
        diffs += [Y[a] - (Y[e] - delta) for a, e in zip(left_ct, m)]
    diffs = np.asarray(diffs)
    se = diffs.std(ddof=1) / np.sqrt(diffs.size) if diffs.size > 1 else np.nan
    return ATEResult.from_estimate(diffs.mean(), se, "MBA", n_selected_mu=0, n_selected_bias=0,
                                   notes=(f"bias_hat={delta!r}", f"stage3_pairs={left_ct.size}",
                                          "se: paired-difference standard error"))


def _inclusion_probability(ds: Dataset, basis: BasisSpec):
    from sklearn.exceptions import ConvergenceWarning
    from sklearn.linear_model import LogisticRegression
    from sklearn.preprocessing import StandardScaler

    P = StandardScaler().fit_transform(power_basis(ds.X, basis))
    model = LogisticRegression(penalty=None, max_iter=5000)
    with warnings.catch_warnings():
        warnings.simplefilter("error", ConvergenceWarning)
        try:
            model.fit(P, ds.S.astype(int))
        except ConvergenceWarning as exc:
            raise EstimationError(f"inclusion model did not converge: {exc}") from None
    return model.predict_proba(P)[:, 1]


def bpp_estimate(ds: Dataset, inclusion_basis: BasisSpec = BasisSpec(), mu_spec: BasisSpec = BasisSpec(),
                 ec_weight=None) -> ATEResult:
    """Power-prior baseline in its Gaussian-likelihood (weighted LS) form.

    External rows are weighted by the estimated inclusion probability
    ``P(S=1 | X)``, experiment rows by 1, and the ANCOVA model without a bias
    term is fitted by weighted least squares.  ``ec_weight`` overrides the
    estimated weights with a constant.
    """
    _check(ds)
    ec = ds.S == 0
    notes = ["BPP approximated by weighted least squares"]
    w = np.ones(ds.N)
    if ec.any():
        if ec_weight is None:
            if ds.m == ds.N:
                raise ValidityError("both study classes are needed")
            p = _inclusion_probability(ds, inclusion_basis)
            clipped = np.clip(p, 1e-6, 1 - 1e-6)
            if np.any(clipped != p):
                notes.append("inclusion probabilities clipped to [1e-6, 1-1e-6]")
            w[ec] = clipped[ec]
        else:
            w[ec] = float(ec_weight)
    P = power_basis(ds.X, mu_spec)
    Xd = np.column_stack([np.ones(ds.N), ds.A, P])
    keep = w > 0
    sw = np.sqrt(w[keep])
    Xw = Xd[keep] * sw[:, None]
    yw = ds.Y[keep] * sw
    coef, *_ = np.linalg.lstsq(Xw, yw, rcond=None)
    r = yw - Xw @ coef
    dof = keep.sum() - Xd.shape[1]
    if dof <= 0 or np.linalg.matrix_rank(Xw) < Xd.shape[1]:
        raise RankDeficiencyError("weighted ANCOVA design is rank deficient")
    sigma2 = r @ r / dof
    cov = sigma2 * np.linalg.inv(Xw.T @ Xw)
    notes.append("se: weighted OLS covariance")
    return ATEResult.from_estimate(coef[1], np.sqrt(cov[1, 1]), "BPP", n_selected_mu=P.shape[1],
                                   n_selected_bias=0, notes=tuple(notes))
