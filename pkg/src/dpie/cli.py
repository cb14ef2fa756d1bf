"""Command-line interface: ``dpie fit | simulate | match | report``.

Settings are resolved as command-line flags, then the ``--config`` JSON
document, then ``DPIE_SEED`` (seed only), then built-in defaults.  Exit codes:
0 success, 1 computation error, 2 usage error.
"""
from __future__ import annotations

import argparse
import io
import json
import os
import sys
import traceback

import numpy as np

from . import __version__
from .basis import BasisSpec
from .data import (Dataset, MatchSpec, atomic_write_text, load_csv, match_external_controls,
                   pairwise_interactions, read_table, save_csv, scale_unit_interval)
from .errors import DPIEError, SchemaError
from .estimators import dpie, re_only, spie
from .scad import PenaltyConfig
from .simulation import Study1Spec, Study2Spec, emit_report, load_report, run_monte_carlo

DEFAULTS = {
    "output_dir": ".",
    "method": "all",
    "basis_q": "auto",
    "basis_scheme": "total_degree",
    "sc_grid": None,
    "n_lambda": 50,
    "folds": 10,
    "seed": 0,
    "jobs": None,
    "scale01": False,
    "interactions": False,
    "divide_by": None,
    "reference_value": None,
    "outcome_col": "Y",
    "treat_col": "A",
    "study_col": "S",
    "T": 100,
    "n": 1000,
    "m": 1000,
    "c": "1,3,5,7,9",
    "zero_fraction": None,
    "setting": "S1,S2",
    "ratio": 2,
    "distance": "mahalanobis",
    "with_replacement": False,
    "pool": None,
    "format": "table",
    "bias_constant": False,
}

_SHOWN = {"sc_grid": "13 log-spaced values in [0.01, 100]", "jobs": "all cores",
          "divide_by": "none", "reference_value": "none", "zero_fraction": "none (sweep c)",
          "pool": "required"}


class UsageError(Exception):
    pass


def _add(p, *flags, key, help, **kw):
    shown = _SHOWN.get(key, DEFAULTS.get(key))
    p.add_argument(*flags, dest=key, default=argparse.SUPPRESS,
                   help=f"{help} (default: {shown})", **kw)


def _common(p, *, plan=True, seed=True):
    _add(p, "--output-dir", key="output_dir", help="directory for output files")
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help="JSON file of settings; keys are flag names with underscores (default: none)")
    if seed:
        _add(p, "--seed", key="seed", type=int, help="random seed; DPIE_SEED is used when this flag is absent")
    if plan:
        _add(p, "--basis-q", key="basis_q",
             help="maximum power of the sieve basis; 'auto' is 1 with --interactions, else 3")
        _add(p, "--basis-scheme", key="basis_scheme", choices=["total_degree", "tensor_product"],
             help="basis construction")
        _add(p, "--sc-grid", key="sc_grid", help="comma-separated lambda2/lambda1 ratios")
        _add(p, "--n-lambda", key="n_lambda", type=int, help="lambda values per ratio")
        _add(p, "--folds", key="folds", type=int, help="cross-validation folds")
        _add(p, "--bias-constant", key="bias_constant", action="store_true",
             help="add a constant (1-S) column to the bias basis")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dpie", description="Treatment-effect estimation with external controls.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="estimate the treatment effect from a CSV file")
    p.add_argument("--input", required=True, help="CSV with covariates, outcome, treatment and study columns")
    _common(p)
    _add(p, "--method", key="method", choices=["dpie", "spie", "re", "all"], help="estimators to run")
    _add(p, "--scale01", key="scale01", action="store_true", help="min-max scale covariates to [0, 1]")
    _add(p, "--interactions", key="interactions", action="store_true",
         help="append pairwise products and squares of the covariates")
    _add(p, "--divide-by", key="divide_by", nargs=2, metavar=("FACTOR", "COLUMNS"),
         help="divide the comma-separated columns by FACTOR before anything else")
    _add(p, "--reference-value", key="reference_value", type=float,
         help="value the 'bias' column is measured against")
    _add(p, "--outcome-col", key="outcome_col", help="outcome column name")
    _add(p, "--treat-col", key="treat_col", help="treatment column name")
    _add(p, "--study-col", key="study_col", help="study indicator column name")

    p = sub.add_parser("simulate", help="run a Monte Carlo study")
    p.add_argument("study", choices=["study1", "study2"])
    _common(p)
    _add(p, "--T", "--replicates", key="T", type=int, help="Monte Carlo replicates")
    _add(p, "--jobs", key="jobs", type=int, help="worker processes")
    _add(p, "--method", key="method",
         help="comma-separated methods (DPIE, SPIE, RE; study2 adds MBA, BPP) or 'all'")
    _add(p, "--n", key="n", type=int, help="experiment sample size")
    _add(p, "--m", key="m", type=int, help="external-control sample size")
    _add(p, "--c", key="c", help="study1: comma-separated magnitude ratios")
    _add(p, "--zero-fraction", key="zero_fraction",
         help="study1: comma-separated zero fractions of delta0 (sweeps sparsity at the first --c)")
    _add(p, "--setting", key="setting", help="study2: comma-separated settings")

    p = sub.add_parser("match", help="build external controls by nearest-neighbour matching")
    p.add_argument("--input", required=True, help="CSV of concurrent-control rows")
    _common(p, plan=False, seed=True)
    _add(p, "--pool", key="pool", help="CSV of candidate external controls")
    _add(p, "--ratio", key="ratio", type=int, help="external controls per concurrent control")
    _add(p, "--distance", key="distance", choices=["mahalanobis", "euclidean"], help="matching distance")
    _add(p, "--with-replacement", key="with_replacement", action="store_true",
         help="allow a pool row to be matched more than once")
    _add(p, "--outcome-col", key="outcome_col", help="outcome column name")
    _add(p, "--treat-col", key="treat_col", help="treatment column name, ignored if absent")
    _add(p, "--study-col", key="study_col", help="study indicator column name, ignored if absent")

    p = sub.add_parser("report", help="re-render a JSON simulation report")
    p.add_argument("--input", required=True, help="JSON report written by 'simulate'")
    _add(p, "--output-dir", key="output_dir", help="directory for output files")
    _add(p, "--format", key="format", choices=["table", "csv", "plotdata"], help="output format")
    return ap


def resolve(args: argparse.Namespace, environ=None) -> dict:
    """Merge flags, config file, environment and defaults."""
    environ = os.environ if environ is None else environ
    given = vars(args).copy()
    cfg = {}
    path = given.pop("config", None)
    if path is not None:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
        unknown = set(cfg) - set(DEFAULTS) - {"input", "study", "command"}
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = dict(DEFAULTS)
    if "DPIE_SEED" in environ:
        try:
            out["seed"] = int(environ["DPIE_SEED"])
        except ValueError:
            raise UsageError(f"DPIE_SEED must be an integer, got {environ['DPIE_SEED']!r}") from None
    out.update(cfg)
    out.update(given)
    for key in ("input", "pool"):
        if out.get(key) is not None and not os.path.isfile(out[key]):
            raise UsageError(f"--{key} {out[key]!r} is not a readable file")
    return out


def _floats(text, what):
    if isinstance(text, (list, tuple)):
        vals = text
    else:
        vals = [t for t in str(text).split(",") if t.strip()]
    try:
        return [float(v) for v in vals]
    except ValueError:
        raise UsageError(f"{what} must be comma-separated numbers, got {text!r}") from None


def _plan(o):
    from .tuning import CVPlan

    kw = dict(folds=int(o["folds"]), n_lambda=int(o["n_lambda"]), seed=int(o["seed"]))
    if o["sc_grid"] is not None:
        kw["sc_grid"] = tuple(_floats(o["sc_grid"], "--sc-grid"))
    try:
        return CVPlan(**kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _basis(o, default_q):
    q = o["basis_q"]
    q = default_q if q in (None, "auto") else q
    try:
        return BasisSpec(int(q), o["basis_scheme"])
    except ValueError as exc:
        raise UsageError(f"--basis-q/--basis-scheme: {exc}") from None


def _bias_basis(o, spec):
    from dataclasses import replace

    return replace(spec, include_constant=bool(o["bias_constant"]))


def _divide(ds: Dataset, factor, cols, outcome_col):
    from dataclasses import replace

    factor = float(factor)
    if factor == 0:
        raise UsageError("--divide-by factor must be nonzero")
    names = [c.strip() for c in cols.split(",") if c.strip()]
    X, Y = ds.X.copy(), ds.Y
    for name in names:
        if name == outcome_col:
            Y = Y / factor
        elif name in ds.column_names:
            j = ds.column_names.index(name)
            X[:, j] = X[:, j] / factor
        elif name in ds.dropped_columns:
            continue
        else:
            raise SchemaError(f"--divide-by column {name!r} not found")
    return replace(ds, X=X, Y=Y)


def _table(results, reference):
    buf = io.StringIO()
    buf.write(f"{'Method':<8}{'Est':>12}{'se':>12}{'bias':>12}{'#v_mu':>8}{'#v_b':>8}\n")
    for r in results:
        bias = "--" if reference is None else f"{abs(r.tau_hat - reference):.4f}"
        buf.write(f"{r.method:<8}{r.tau_hat:>12.4f}{r.se:>12.4f}{bias:>12}"
                  f"{r.n_selected_mu:>8d}{r.n_selected_bias:>8d}\n")
    return buf.getvalue()


def cmd_fit(o) -> int:
    ds = load_csv(o["input"], o["outcome_col"], o["treat_col"], o["study_col"],
                  require_study=o["method"] != "re")
    if o["divide_by"]:
        ds = _divide(ds, *o["divide_by"], o["outcome_col"])
    if o["scale01"]:
        ds = scale_unit_interval(ds)
    if o["interactions"]:
        ds = pairwise_interactions(ds, include_squares=True)
    spec = _basis(o, 1 if o["interactions"] else 3)
    b_spec = _bias_basis(o, spec)
    plan, cfg = _plan(o), PenaltyConfig()
    which = ["dpie", "spie", "re"] if o["method"] == "all" else [o["method"]]
    if ds.m == 0:
        which = [w for w in which if w == "re"] or ["re"]
    results = []
    for w in which:
        if w == "dpie":
            results.append(dpie(ds, spec, b_spec, plan, cfg))
        elif w == "spie":
            results.append(spie(ds, spec, b_spec, plan, cfg))
        else:
            results.append(re_only(ds, spec, plan, cfg))
    out = o["output_dir"]
    os.makedirs(out, exist_ok=True)
    doc = {"n": ds.n, "m": ds.m, "covariates": list(ds.column_names),
           "dropped_columns": list(ds.dropped_columns),
           "reference_value": o["reference_value"],
           "results": [r.to_dict() for r in results]}
    atomic_write_text(os.path.join(out, "fit_results.json"), json.dumps(doc, indent=2) + "\n")
    table = _table(results, o["reference_value"])
    atomic_write_text(os.path.join(out, "fit_summary.txt"), table)
    sys.stdout.write(table)
    return 0


def _methods(o, allowed):
    if o["method"] in (None, "all"):
        return list(allowed)
    names = [m.strip().upper() for m in str(o["method"]).split(",") if m.strip()]
    bad = [m for m in names if m not in allowed]
    if bad or not names:
        raise UsageError(f"unknown method(s) {bad}; choose from {', '.join(allowed)}")
    return names


def cmd_simulate(o) -> int:
    T = int(o["T"])
    if T < 2:
        raise UsageError("--T must be at least 2 (the Monte Carlo variance needs two replicates)")
    jobs = o["jobs"] if o["jobs"] is not None else (os.cpu_count() or 1)
    seed, out = int(o["seed"]), o["output_dir"]
    plan = _plan(o)
    n, m = int(o["n"]), int(o["m"])
    meta = {"study": o["study"], "T": T, "base_seed": seed, "n": n, "m": m,
            "folds": plan.folds, "n_lambda": plan.n_lambda, "sc_grid": list(plan.sc_grid)}
    written = []
    if o["study"] == "study1":
        methods = _methods(o, ("DPIE", "SPIE", "RE"))
        cs = _floats(o["c"], "--c")
        if o["zero_fraction"] is not None:
            xs, x_name = _floats(o["zero_fraction"], "--zero-fraction"), "zero_fraction"
            make = lambda x: Study1Spec(n=n, m=m, c=cs[0], zero_fraction_delta=x)  # noqa: E731
        else:
            xs, x_name = cs, "c"
            make = lambda x: Study1Spec(n=n, m=m, c=x)  # noqa: E731
        meta.update(x_name=x_name, delta0="zeros in the last ceil(50*f) positions, "
                    "nonzeros proportional to 1..k, scaled to ||delta0||_1 = c*||beta0||_1")
        results = {}
        for x in xs:
            try:
                spec = make(x)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            results[float(x)] = run_monte_carlo(spec, methods, T, seed, plan=plan, n_jobs=jobs)
        for fmt in ("csv", "json", "plotdata"):
            written += emit_report(results, fmt, out, stem="study1", x_name=x_name, meta=meta)
    else:
        methods = _methods(o, ("DPIE", "SPIE", "RE", "MBA", "BPP"))
        spec_b = _basis(o, 3)
        settings = [s.strip().upper() for s in str(o["setting"]).split(",") if s.strip()]
        for s in settings:
            if s not in ("S1", "S2"):
                raise UsageError(f"unknown setting {s!r}")
        for s in settings:
            res = run_monte_carlo(Study2Spec(s, n, m), methods, T, seed, plan=plan,
                                  mu_spec=spec_b, b_spec=_bias_basis(o, spec_b), n_jobs=jobs)
            meta_s = dict(meta, setting=s, basis_q=spec_b.max_power, basis_scheme=spec_b.scheme,
                          bias_constant=bool(o["bias_constant"]))
            for fmt in ("csv", "json"):
                written += emit_report(res, fmt, out, stem=f"study2_{s}", meta=meta_s)
    for p in written:
        print(p)
    return 0


def _load_plain(path, outcome_col, treat_col, study_col, S):
    header, data = read_table(path)
    if outcome_col not in header:
        raise SchemaError(f"{path}: missing column {outcome_col!r}")
    skip = {outcome_col, treat_col, study_col}
    xcols = [j for j, h in enumerate(header) if h not in skip]
    N = len(data)
    return Dataset(data[:, xcols].reshape(N, len(xcols)), np.zeros(N), data[:, header.index(outcome_col)],
                   np.full(N, float(S)), [header[j] for j in xcols])


def cmd_match(o) -> int:
    if o["pool"] is None:
        raise UsageError("--pool is required")
    ratio = int(o["ratio"])
    if ratio < 1:
        raise UsageError("--ratio must be a positive integer")
    cc = _load_plain(o["input"], o["outcome_col"], o["treat_col"], o["study_col"], 1)
    pool = _load_plain(o["pool"], o["outcome_col"], o["treat_col"], o["study_col"], 0)
    common = [c for c in cc.column_names if c in pool.column_names]
    if not common:
        raise SchemaError("no covariate columns shared by --input and --pool")
    pick = lambda ds: ds.__class__(ds.X[:, [ds.column_names.index(c) for c in common]],  # noqa: E731
                                   ds.A, ds.Y, ds.S, common)
    res = match_external_controls(pick(cc), pick(pool),
                                  MatchSpec(ratio, o["distance"], bool(o["with_replacement"])))
    out = o["output_dir"]
    os.makedirs(out, exist_ok=True)
    save_csv(res.controls, os.path.join(out, "matched_ec.csv"), o["outcome_col"], o["treat_col"], o["study_col"])
    buf = io.StringIO()
    buf.write("cc_row,ec_row,distance\n")
    for a, b, d in res.report:
        buf.write(f"{int(a)},{int(b)},{float(d)!r}\n")
    atomic_write_text(os.path.join(out, "match_report.csv"), buf.getvalue())
    print(f"matched {res.controls.N} external controls to {cc.N} concurrent controls")
    return 0


def cmd_report(o) -> int:
    results = load_report(o["input"])
    stem = os.path.splitext(os.path.basename(o["input"]))[0]
    fmt = o["format"]
    if fmt == "table":
        first = next(iter(results.values()))
        rows = [(None, results)] if not isinstance(first, dict) else list(results.items())
        cols = ("abs_bias", "true_var", "mse_tau", "mean_est_var", "coverage",
                "mse_beta", "pct_over_select", "pct_under_select")
        lines = [f"{'x':>8} {'method':<6}" + "".join(f"{c:>17}" for c in cols)]
        for x, per in rows:
            for m in per.values():
                vals = "".join(f"{'--' if getattr(m, c) is None else format(getattr(m, c), '.6g'):>17}"
                               for c in cols)
                lines.append(f"{'' if x is None else format(x, 'g'):>8} {m.method:<6}{vals}")
        print("\n".join(lines))
        return 0
    with open(o["input"]) as fh:
        x_name = json.load(fh).get("x_name") or "x"
    for p in emit_report(results, fmt, o["output_dir"], stem=stem, x_name=x_name):
        print(p)
    return 0


_COMMANDS = {"fit": cmd_fit, "simulate": cmd_simulate, "match": cmd_match, "report": cmd_report}


def _provenance(exc) -> str:
    mod = type(exc).__module__
    for frame in traceback.extract_tb(exc.__traceback__):
        parts = frame.filename.replace("\\", "/").split("/")
        if "dpie" in parts[:-1]:
            mod = "dpie." + os.path.splitext(parts[-1])[0]
    return mod


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve(args)
        return _COMMANDS[opts["command"]](opts)
    except UsageError as exc:
        print(f"dpie {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (DPIEError, ValueError, OSError, np.linalg.LinAlgError) as exc:
        print(f"dpie {args.command}: error in {_provenance(exc)}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
