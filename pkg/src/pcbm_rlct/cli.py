"""Command-line front end: ``pcbm-rlct {rlct,sweep,compare,oracle,estimate-rlct}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import rlct as F
from .estimators import estimate_lambda_wbic, fit_lambda_slope
from .model import make_ground_truth, sample_dataset
from .svg import line_plot
from .sweep import (
    FLAGGED_FRACTION_LIMIT,
    STREAM_DATA,
    ConfigError,
    ExperimentConfig,
    compare_sweeps,
    derive_seed,
    read_sweep_csv,
    run_sweep,
    summarize,
)
from .volume import WidenThresholdsError, rrr_truth, volume_scaling_lambda

EXIT_OK, EXIT_VALIDATION, EXIT_FLAGGED = 0, 2, 3

log = logging.getLogger("pcbm_rlct")


def _fmt(q) -> str:
    if q is None:
        return "n/a"
    q = Fraction(q)
    return f"{q} ({float(q):.4f})"


def cmd_rlct(args) -> int:
    shape = F.PcbmShape(args.n, args.h1, args.h2, args.m, args.rank)
    rows = []
    if shape.h1:
        rows.append((f"lambda_R(N={shape.n_in}, H1={shape.h1}, M={shape.m_out}, r'={shape.r_prime})",
                     F.rlct_rrr(F.RrrShape(shape.n_in, shape.h1, shape.m_out, shape.r_prime))))
    else:
        rows.append(("lambda_R (no tacit units)", Fraction(0)))
    rows.append((f"lambda_C (CBM, H={shape.h})", F.rlct_cbm(shape.n_in, shape.h, shape.m_out)))
    rows.append(("lambda_P upper bound (PCBM)", F.rlct_pcbm_upper(shape)))
    rows.append(("gap lower bound, n*(G_C - G_P) >=", F.gen_error_gap_lower(shape)))
    m_real = args.m if args.m_real is None else args.m_real
    h2_real = args.h2 if args.h2_real is None else args.h2_real
    try:
        cat = F.CategoricalShape(shape.n_in, shape.h1, h2_real, args.h2_cat, m_real, args.m_cat, shape.r_prime)
        cat_val = F.rlct_pcbm_upper_categorical(cat)
        label = (f"categorical bound (H2r={h2_real}, H2c={args.h2_cat}, "
                 f"Mr={m_real}, Mc={args.m_cat})")
    except F.ShapeError as exc:
        cat_val, label = None, f"categorical bound ({exc})"
    rows.append((label, cat_val))

    if args.json:
        print(json.dumps({k: (None if v is None else str(v)) for k, v in rows}, indent=2))
        return EXIT_OK
    width = max(len(k) for k, _ in rows)
    print(f"shape {shape.shape_id}")
    for k, v in rows:
        print(f"  {k:<{width}}  {_fmt(v)}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.out_dir:
        config = ExperimentConfig(**{**config.__dict__, "out_dir": Path(args.out_dir)})

    def progress(rec):
        log.info("n=%d rep=%d g=%.5f rhat=%.3f%s", rec.n, rec.replication, rec.g_hat,
                 rec.rhat_max, " FLAGGED" if rec.flagged else "")

    summary = run_sweep(config, jobs=args.jobs, timing=not args.no_timing, progress=progress)
    for p in summary["per_n"]:
        print(f"n={p['n']:>6}  n*mean_G={p['n_times_mean_g']:.4f} +/- {p['n_times_stderr']:.4f}"
              f"  (reps={p['replications']})")
    if "lambda_hat" in summary:
        print(f"lambda_hat={summary['lambda_hat']:.4f} +/- {summary['lambda_hat_stderr']:.4f}"
              f"  bound={summary['lambda_bound']:.4f}  lambda_C={summary['lambda_cbm']:.4f}")
    print(f"flagged records excluded: {summary['excluded_flagged']}")
    if summary["flagged_fraction"] > FLAGGED_FRACTION_LIMIT:
        print(f"error: {summary['flagged_fraction']:.0%} of records flagged (rhat_max >= 1.2)",
              file=sys.stderr)
        return EXIT_FLAGGED
    return EXIT_OK


def cmd_compare(args) -> int:
    pcbm = ExperimentConfig.load(args.pcbm)
    cbm = ExperimentConfig.load(args.cbm)
    out = Path(args.out_dir) if args.out_dir else Path(pcbm.out_dir).parent / "compare"
    report = compare_sweeps(pcbm, cbm, out_dir=out)
    for r in report["per_n"]:
        print(f"n={r['n']:>6}  G_P={r['mean_g_pcbm']:.5f}  G_C={r['mean_g_cbm']:.5f}  "
              f"diff={r['difference']:.5f} +/- {r['difference_stderr']:.5f}  "
              f"bound/n={r['gap_lower_bound']:.5f}  "
              f"{'ok' if r['pcbm_not_worse'] and r['gap_meets_bound'] else 'FAIL'}")
    print(f"wrote {out / 'compare.json'} and {out / 'compare.svg'}")
    return EXIT_OK


def _thresholds(args):
    if args.thresholds:
        return np.array(args.thresholds, dtype=float)
    return np.logspace(np.log10(args.t_max), np.log10(args.t_min), args.n_thresholds)


def cmd_oracle(args) -> int:
    if args.error_fn == "rrr":
        shape = F.RrrShape(args.n, args.h, args.m, args.rank)
        truth = rrr_truth(shape, seed=args.seed)
        exact = F.rlct_rrr(shape)
        label = f"rrr N={shape.n_in} H={shape.h} M={shape.m_out} r={shape.r}"
    else:
        shape = F.PcbmShape(args.n, args.h1, args.h2, args.m, args.rank)
        truth = make_ground_truth(shape, args.truth_scale, args.seed)
        exact = F.rlct_pcbm_upper(shape)
        label = f"{args.error_fn} {shape.shape_id}"
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        report = volume_scaling_lambda(
            args.error_fn, shape, truth, args.box, args.samples, _thresholds(args), args.seed, args.method
        )
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    record = report.to_json()
    record["error_fn"] = args.error_fn
    record["closed_form"] = str(exact)
    record["closed_form_kind"] = "exact" if args.error_fn in ("rrr", "K_bar") else "upper_bound"
    (out / "oracle.json").write_text(json.dumps(record, indent=2) + "\n")
    fitted = [report.intercept + report.lambda_vol * np.log(t) for t in report.thresholds]
    (out / "oracle.svg").write_text(
        line_plot(
            [("log V(t)", report.thresholds, [np.exp(v) for v in report.log_volume]),
             (f"fit slope {report.lambda_vol:.3f}", report.thresholds, [np.exp(v) for v in fitted])],
            xlabel="threshold t", ylabel="volume V(t)", title=label, logx=True, logy=True,
        )
    )
    print(f"{label}: lambda_vol={report.lambda_vol:.4f} (R^2={report.fit_r2:.5f}), closed form {_fmt(exact)}")
    return EXIT_OK


def cmd_estimate_rlct(args) -> int:
    config = ExperimentConfig.load(args.config)
    if args.method == "slope":
        records = read_sweep_csv(Path(config.out_dir) / "sweep.csv")
        if not records:
            raise ConfigError(f"no sweep results in {config.out_dir}")
        summary = summarize(config, records)
        usable = [p for p in summary["per_n"] if p["replications"] > 1]
        est = fit_lambda_slope([(p["n"], p["mean_g"], p["stderr"]) for p in usable])
    else:
        n = args.n or config.n_grid[-1]
        truth = config.truth()
        data = sample_dataset(truth, n, derive_seed(config.master_seed, n, 0, STREAM_DATA))
        est = estimate_lambda_wbic(data, config.prior, config.sampler, n, shape=config.shape)
    result = {
        "method": est.method,
        "lambda_hat": est.lambda_hat,
        "std_err": est.std_err,
        "n_grid": est.n_grid,
        "reliable": est.reliable,
        "lambda_bound": float(F.rlct_pcbm_upper(config.shape)),
        "lambda_cbm": float(F.rlct_cbm(config.shape.n_in, config.shape.h, config.shape.m_out)),
    }
    print(json.dumps(result, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcbm-rlct", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("rlct", help="print exact RLCTs and bounds for one shape")
    r.add_argument("--n", type=int, required=True, help="input dimension N")
    r.add_argument("--h1", type=int, default=0, help="tacit (unsupervised) hidden units")
    r.add_argument("--h2", type=int, required=True, help="concept-supervised hidden units")
    r.add_argument("--m", type=int, required=True, help="output dimension M")
    r.add_argument("--rank", type=int, default=0, help="rank of the tacit truth A1^0 B1^0")
    r.add_argument("--m-real", type=int, default=None, help="real outputs (categorical variant)")
    r.add_argument("--m-cat", type=int, default=0, help="categorical output classes")
    r.add_argument("--h2-real", type=int, default=None, help="real concepts (categorical variant)")
    r.add_argument("--h2-cat", type=int, default=0, help="categorical concepts")
    r.add_argument("--json", action="store_true", help="emit exact fractions as JSON")
    r.set_defaults(func=cmd_rlct)

    s = sub.add_parser("sweep", help="run or resume a generalization-error sweep")
    s.add_argument("config", help="experiment config (JSON)")
    s.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    s.add_argument("--out-dir", default=None, help="override the config's out_dir")
    s.add_argument("--no-timing", action="store_true",
                   help="write wall_time_ms as 0 so sweep.csv is byte-reproducible")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="compare a PCBM sweep with a matched CBM sweep")
    c.add_argument("pcbm", help="PCBM experiment config")
    c.add_argument("cbm", help="CBM experiment config")
    c.add_argument("--out-dir", default=None)
    c.set_defaults(func=cmd_compare)

    o = sub.add_parser("oracle", help="volume-scaling estimate of a learning coefficient")
    o.add_argument("--error-fn", choices=["K", "K_bar", "rrr"], required=True)
    o.add_argument("--n", type=int, required=True)
    o.add_argument("--m", type=int, required=True)
    o.add_argument("--h", type=int, default=1, help="hidden units (rrr)")
    o.add_argument("--h1", type=int, default=0, help="tacit units (K, K_bar)")
    o.add_argument("--h2", type=int, default=1, help="concept units (K, K_bar)")
    o.add_argument("--rank", type=int, default=0)
    o.add_argument("--box", type=float, default=1.0, help="half width of the parameter box")
    o.add_argument("--samples", type=int, default=4000, help="particles (or uniform draws)")
    o.add_argument("--method", choices=["splitting", "uniform"], default="splitting")
    o.add_argument("--t-max", type=float, default=1e-5)
    o.add_argument("--t-min", type=float, default=1e-11)
    o.add_argument("--n-thresholds", type=int, default=13)
    o.add_argument("--thresholds", type=float, nargs="+", default=None)
    o.add_argument("--truth-scale", type=float, default=0.5)
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--out-dir", default="runs/oracle")
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("estimate-rlct", help="slope fit over a sweep, or a two-temperature estimate")
    e.add_argument("config", help="experiment config (JSON)")
    e.add_argument("--method", choices=["slope", "wbic"], default="slope")
    e.add_argument("--n", type=int, default=None, help="sample size for --method wbic")
    e.set_defaults(func=cmd_estimate_rlct)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (F.ShapeError, ConfigError, WidenThresholdsError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
