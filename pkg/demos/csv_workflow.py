"""The command-line workflow on a job-training-shaped file.

The real experiment and survey files are not bundled, so this builds a
synthetic stand-in with the same columns: 185 treated, 260 concurrent
controls and a large survey pool.  Earnings are in dollars.

Run with ``python demos/csv_workflow.py`` (under a minute).
"""
import os
import tempfile

import numpy as np

from dpie.cli import main

rng = np.random.default_rng(2024)
cols = ["age", "educ", "black", "hisp", "married", "nodegree", "re74", "re75", "re78"]


def people(k, older=0.0, richer=1.0):
    age = np.clip(rng.normal(25 + older, 7, k), 17, 55).round()
    educ = np.clip(rng.normal(10.3, 2, k), 3, 16).round()
    black = (rng.random(k) < 0.8 - 0.5 * (richer > 1)).astype(float)
    hisp = (1 - black) * (rng.random(k) < 0.4)
    married = (rng.random(k) < 0.2 + 0.4 * (richer > 1)).astype(float)
    nodeg = (educ < 12).astype(float)
    re74 = np.round(rng.gamma(0.6 * richer, 3500, k), 2)
    re75 = np.round(0.5 * re74 + rng.gamma(0.6 * richer, 1800, k), 2)
    return np.column_stack([age, educ, black, hisp, married, nodeg, re74, re75])


def outcome(X, treat, survey):
    base = 1500 + 0.45 * X[:, 7] + 120 * X[:, 1] + 400 * survey + 0.08 * survey * X[:, 6]
    return np.round(np.maximum(0, base + 1700 * treat + rng.normal(0, 5500, len(X))), 2)


def write(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(f"{v:g}" for v in r) + "\n")


work = tempfile.mkdtemp(prefix="dpie_demo_")
treated, controls, pool = people(185), people(260), people(3000, older=8, richer=3)
cc_y = outcome(controls, 0, 0)
pool_y = outcome(pool, 0, 1)

# step 1: pick two survey controls per concurrent control
write(os.path.join(work, "cc.csv"), cols, np.column_stack([controls, cc_y]))
write(os.path.join(work, "pool.csv"), cols, np.column_stack([pool, pool_y]))
main(["match", "--input", os.path.join(work, "cc.csv"), "--pool", os.path.join(work, "pool.csv"),
      "--ratio", "2", "--outcome-col", "re78", "--output-dir", work])

# step 2: stack experiment and matched controls into one analysis file
matched = np.loadtxt(os.path.join(work, "matched_ec.csv"), delimiter=",", skiprows=1)
with open(os.path.join(work, "matched_ec.csv")) as fh:
    mhead = fh.readline().strip().split(",")
ec = matched[:, [mhead.index(c) for c in cols]]
rows = np.vstack([
    np.column_stack([treated, outcome(treated, 1, 0), np.ones(185), np.ones(185)]),
    np.column_stack([controls, cc_y, np.zeros(260), np.ones(260)]),
    np.column_stack([ec, np.zeros(len(ec)), np.zeros(len(ec))]),
])
write(os.path.join(work, "analysis.csv"), cols + ["treat", "S"], rows)
print(f"analysis file: {len(rows)} rows ({len(ec)} matched external controls)")

# step 3: earnings in thousands, covariates on [0, 1], pairwise products
main(["fit", "--input", os.path.join(work, "analysis.csv"), "--outcome-col", "re78", "--treat-col", "treat",
      "--divide-by", "1000", "re74,re75,re78", "--scale01", "--interactions",
      "--reference-value", "1.7", "--folds", "5", "--n-lambda", "20", "--output-dir", work])
print("outputs in", work)
