"""Why two penalty levels help when the bias is much larger than the signal.

Study 1 style data: 50 covariates, every outcome coefficient small and
nonzero, half of the bias coefficients large.  A single penalty has to pick
a compromise level and drops the small outcome coefficients.

Run with ``python demos/two_penalties.py`` (a few seconds).
"""
import numpy as np

from dpie import BasisSpec, CVPlan, Study1Spec, assemble_design, gen_study1, scad_derivative, scad_value
from dpie.basis import BIAS, MU
from dpie.estimators import penalized_pipeline

# the SCAD penalty: linear near zero, flat beyond a * lambda
lam = 1.0
for t in (0.5, 1.0, 2.0, 3.7, 5.0):
    print(f"t={t:3.1f}  P={scad_value(t, lam):.4f}  P'={scad_derivative(t, lam):.4f}")

ds, beta0, delta0 = gen_study1(Study1Spec(n=1000, m=1000, c=7.0, seed=3))
print(f"||beta0||_1 = {beta0.sum():.1f}, ||delta0||_1 = {np.abs(delta0).sum():.1f}, "
      f"{np.count_nonzero(delta0)} nonzero bias coefficients")

lin = BasisSpec(1)
D = assemble_design(ds, lin, lin, include_treatment=False)
plan = CVPlan(folds=5, n_lambda=30, sc_grid=tuple(np.logspace(-2, 2, 7)))

for label, p in (("two penalties", plan), ("one penalty", plan.replace(sc_grid=(1.0,)))):
    pf = penalized_pipeline(D, ds.Y, ds, p)
    b = pf.theta[D.columns(MU)]
    kept_b = np.isin(D.columns(MU), pf.active)
    kept_d = np.isin(D.columns(BIAS), pf.active)
    rmse = np.sqrt(np.mean((b - beta0) ** 2))
    print(f"{label:14s} sc={pf.cv.best_sc:7.3g}  beta kept {kept_b.sum():2d}/50  "
          f"bias kept {kept_d.sum():2d} (true {np.count_nonzero(delta0)})  rmse(beta) {rmse:.4f}")
