"""Borrowing external controls on one simulated trial.

Run with ``python demos/borrowing_external_controls.py``.  Takes about a
minute on one core.
"""
from dpie import (BasisSpec, CVPlan, Study2Spec, assemble_design, bpp_estimate, dpie, gen_study2,
                  mba_estimate, plugin_variance, re_only, spie)
from dpie.basis import BIAS
from dpie.estimators import penalized_pipeline

# one trial of 1000 randomized patients plus 1000 external controls
ds, tau = gen_study2(Study2Spec("S2", n=1000, m=1000, seed=7))
print(f"{ds.n} trial rows, {ds.m} external controls, true effect {tau}")

# external controls are shifted by 10 x1^2 + 4 x2^3, so pooling them naively
# is badly off
naive = ds.Y[ds.A == 1].mean() - ds.Y[ds.A == 0].mean()
print(f"naive treated-minus-all-controls difference: {naive:.3f}")

# the trial alone is unbiased but ignores half the data
q3 = BasisSpec(3)
re = re_only(ds, q3)
print(f"trial only  {re.tau_hat:7.4f}  se {re.se:.4f}")

# DPIE fits the bias with its own sieve and its own penalty level
est = dpie(ds, q3, q3)
print(f"DPIE        {est.tau_hat:7.4f}  se {est.se:.4f}  "
      f"({est.n_selected_mu} outcome terms, {est.n_selected_bias} bias terms kept)")

# the same fit with one shared penalty
sp = spie(ds, q3, q3)
print(f"SPIE        {sp.tau_hat:7.4f}  se {sp.se:.4f}")

# which bias terms survived?
D = assemble_design(ds, q3, q3)
pf = penalized_pipeline(D, ds.Y, ds, CVPlan())
print("bias terms kept:", ", ".join(D.names[j] for j in pf.active if D.groups[j] == BIAS))
print(f"lambda1 {pf.cv.best_lambda1:.4g}, lambda2 {pf.cv.best_lambda2:.4g}, sc {pf.cv.best_sc:.3g}")

# variance with and without the external rows, same residual variance
v = plugin_variance(D, ds.Y, pf.active)
print(f"plug-in variance {v.v_combined:.2e} combined vs {v.v_re_only:.2e} trial only "
      f"({1 - v.v_combined / v.v_re_only:.0%} smaller)")

# both baselines assume a constant shift, which is wrong here
mba = mba_estimate(ds)
bpp = bpp_estimate(ds, q3, q3)
print(f"MBA         {mba.tau_hat:7.4f}  se {mba.se:.4f}")
print(f"BPP         {bpp.tau_hat:7.4f}  se {bpp.se:.4f}")
