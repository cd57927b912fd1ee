"""Acceptance criteria 1-7, each at its stated tolerance.

Every criterion prints one ``CRITERION k: PASS|FAIL`` line, repeated in the
pytest terminal summary.  The sweeps behind criteria 4-6 use the configs in
``configs/`` and write to their ``out_dir``; completed cells are reused, so a
rerun after a full run only recomputes summaries.
"""

import itertools
import math
import os
import time
import warnings
from decimal import Decimal, getcontext
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from pcbm_rlct.estimators import estimate_gen_error, log_predictive
from pcbm_rlct.model import (
    Weights,
    averaged_error_K_batch,
    averaged_error_upper_batch,
    log_density,
    make_ground_truth,
    sample_dataset,
)
from pcbm_rlct.rlct import PcbmShape, RrrShape, rlct_cbm, rlct_pcbm_upper, rlct_rrr, rrr_case
from pcbm_rlct.sampler import PriorSpec, grad_log_posterior, log_posterior_unnorm, point_mass
from pcbm_rlct.sweep import ExperimentConfig, compare_sweeps, read_sweep_csv, run_sweep
from pcbm_rlct.volume import CurvatureWarning, volume_scaling_lambda

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
JOBS = os.cpu_count() or 1


def report(k, ok, detail):
    line = f"CRITERION {k}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line, flush=True)
    ACCEPTANCE_LINES.append(line)
    return ok


# criterion 1 ---------------------------------------------------------------

REFERENCE = {
    (1, 1, 1, 1): Fraction(1, 2),
    (1, 1, 1, 0): Fraction(1, 2),
    (1, 1, 3, 1): Fraction(3, 2),
    (2, 1, 4, 0): Fraction(1),
    (1, 3, 1, 1): Fraction(1, 2),
}


def _branch_conditions(n, h, m, r):
    return (
        m + r <= n + h and n + r <= m + h and h + r <= n + m,
        n + h < m + r,
        m + h < n + r,
        n + m < h + r,
    )


def _case1(n, h, m, r):
    s = h + r
    return Fraction(2 * s * (n + m) - (n - m) ** 2 - s * s, 8) + (Fraction(1, 8) if (n + m + h + r) % 2 else 0)


def test_criterion_1_formula_suite():
    start = time.perf_counter()
    failures = []
    for dims, expected in REFERENCE.items():
        if rlct_rrr(RrrShape(*dims)) != expected:
            failures.append(f"reference {dims}")
    grid = [
        (n, h, m, r)
        for n, h, m in itertools.product(range(1, 13), repeat=3)
        for r in range(min(n, h, m) + 1)
    ]
    values = {g: rlct_rrr(RrrShape(*g)) for g in grid}
    for (n, h, m, r), lam in values.items():
        if sum(_branch_conditions(n, h, m, r)) != 1:
            failures.append(f"partition {(n, h, m, r)}")
        if lam != values[(m, h, n, r)]:
            failures.append(f"symmetry {(n, h, m, r)}")
        if r > 0 and values[(n, h, m, r - 1)] > lam:
            failures.append(f"monotone {(n, h, m, r)}")
        if _branch_conditions(n, h, m, r)[0]:
            neighbours = {
                m + r == n + h: Fraction(h * n + r * (m - h), 2),
                n + r == m + h: Fraction(h * m + r * (n - h), 2),
                h + r == n + m: Fraction(n * m, 2),
            }
            for on_edge, val in neighbours.items():
                if on_edge and (n + m + h + r) % 2 == 0 and val != lam:
                    failures.append(f"continuity {(n, h, m, r)}")
        if rrr_case(RrrShape(n, h, m, r)) in ("1a", "1b") and lam != _case1(n, h, m, r):
            failures.append(f"case-1 value {(n, h, m, r)}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed < 1.0
    report(1, ok, f"{len(grid)} shapes, {len(failures)} failures, {elapsed:.2f} s (limit 1 s)")
    assert not failures, failures[:10]
    assert elapsed < 1.0


# criterion 2 ---------------------------------------------------------------


def test_criterion_2_inequality_chain():
    start = time.perf_counter()
    count, bad = 0, []
    for n, m, h1, h2 in itertools.product(range(1, 13), range(1, 13), range(0, 12), range(1, 13)):
        if h1 + h2 > 12:
            continue
        for r in range(min(n, h1, m) + 1):
            s = PcbmShape(n, h1, h2, m, r)
            count += 1
            if not rlct_pcbm_upper(s) <= rlct_cbm(n, s.h, m):
                bad.append(s)
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 1.0
    report(2, ok, f"{count} PCBM shapes, {len(bad)} violations, {elapsed:.2f} s (limit 1 s)")
    assert not bad
    assert elapsed < 1.0


# criterion 3 ---------------------------------------------------------------

ORACLE_GRID = [
    (n, h, m, r)
    for n, h, m in itertools.product(range(1, 6), repeat=3)
    if h * (n + m) <= 6
    for r in range(min(n, h, m) + 1)
]

ERROR_SHAPES = [
    PcbmShape(1, 1, 1, 1, 0),
    PcbmShape(1, 1, 1, 1, 1),
    PcbmShape(2, 1, 1, 2, 0),
    PcbmShape(2, 1, 1, 2, 1),
    PcbmShape(1, 2, 1, 1, 1),
    PcbmShape(2, 2, 1, 1, 1),
]

_criterion_3 = {}


def test_criterion_3a_volume_oracle():
    start = time.perf_counter()
    worst, misses = 0.0, []
    for dims in ORACLE_GRID:
        shape = RrrShape(*dims)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CurvatureWarning)
            rep = volume_scaling_lambda("rrr", shape=shape, seed=1)
        err = abs(rep.lambda_vol - float(rlct_rrr(shape)))
        worst = max(worst, err)
        if err >= 0.15:
            misses.append((dims, rep.lambda_vol))
    elapsed = time.perf_counter() - start
    _criterion_3["oracle"] = (not misses, elapsed, worst, len(ORACLE_GRID))
    assert not misses, misses


def test_criterion_3b_K_below_K_bar():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    violations = {}
    for shape in ERROR_SHAPES:
        truth = make_ground_truth(shape, 1.0, seed=1)
        theta = rng.uniform(-2, 2, (100_000, shape.n_params))
        k, kbar = averaged_error_K_batch(theta, truth), averaged_error_upper_batch(theta, truth)
        violations[shape.shape_id] = int(np.sum(k > kbar + 1e-12))
    elapsed = time.perf_counter() - start
    _criterion_3["k_le_kbar"] = (all(v == 0 for v in violations.values()), elapsed, violations)
    assert all(v == 0 for v in violations.values()), violations


def test_criterion_3_report():
    oracle = _criterion_3.get("oracle")
    order = _criterion_3.get("k_le_kbar")
    if oracle is None or order is None:
        pytest.skip("criterion 3 parts did not run")
    total = oracle[1] + order[1]
    ok = oracle[0] and order[0] and total < 300
    n_bad = sum(v > 0 for v in order[2].values())
    report(
        3,
        ok,
        f"oracle: {oracle[3]} instances, max |error| {oracle[2]:.3f} (limit 0.15); "
        f"K <= K_bar: violated on {n_bad}/{len(order[2])} shapes at 1e5 points; {total:.0f} s (limit 300 s)",
    )
    assert ok


# criteria 4-6 --------------------------------------------------------------


def _sweep(name):
    config = ExperimentConfig.load(CONFIGS / f"{name}.json")
    return config, run_sweep(config, jobs=JOBS)


def _nonneg_gn(config):
    """Every unflagged G_n estimate is non-negative up to 3 standard errors."""
    rows = read_sweep_csv(Path(config.out_dir) / "sweep.csv")
    return all(r.g_hat >= -3 * r.std_err for r in rows if not r.flagged)


@pytest.mark.slow
def test_criterion_4_cbm_calibration():
    config, summary = _sweep("cbm_calibration")
    lam = summary["lambda_hat"]
    nonneg = _nonneg_gn(config)
    ok = 0.7 <= lam <= 1.3 and nonneg and summary["flagged_fraction"] <= 0.2
    per_n = ", ".join(f"n={p['n']}: {p['n_times_mean_g']:.3f}" for p in summary["per_n"])
    report(4, ok, f"lambda_hat = {lam:.3f} +/- {summary['lambda_hat_stderr']:.3f} (target [0.7, 1.3]); {per_n}")
    assert 0.7 <= lam <= 1.3
    assert nonneg
    assert summary["flagged_fraction"] <= 0.2


@pytest.mark.slow
def test_criterion_5_pcbm_bound():
    config, summary = _sweep("pcbm_main")
    bound = float(rlct_pcbm_upper(config.shape))
    assert bound == 3.0
    per_n_ok = [p["n_times_mean_g"] <= bound + 2 * p["n_times_stderr"] for p in summary["per_n"]]
    fit_ok = summary["lambda_hat"] <= bound + 2 * summary["lambda_hat_stderr"]
    ok = all(per_n_ok) and fit_ok and _nonneg_gn(config)
    per_n = ", ".join(
        f"n={p['n']}: {p['n_times_mean_g']:.2f}+/-{p['n_times_stderr']:.2f}" for p in summary["per_n"]
    )
    report(
        5,
        ok,
        f"bound 3; lambda_hat = {summary['lambda_hat']:.3f} +/- {summary['lambda_hat_stderr']:.3f}; {per_n}; "
        f"flagged excluded {summary['excluded_flagged']}",
    )
    assert all(per_n_ok)
    assert fit_ok
    assert _nonneg_gn(config)


@pytest.mark.slow
def test_criterion_6_pcbm_beats_cbm():
    pcbm, _ = _sweep("pcbm_main")
    cbm, _ = _sweep("cbm_matched")
    rep = compare_sweeps(pcbm, cbm, out_dir=Path(pcbm.out_dir).parent / "compare")
    not_worse = all(r["pcbm_not_worse"] for r in rep["per_n"])
    gap_ok = all(r["gap_meets_bound"] for r in rep["per_n"])
    detail = "; ".join(
        f"n={r['n']}: diff {r['difference']:.5f} +/- {r['difference_stderr']:.5f} vs bound {r['gap_lower_bound']:.5f}"
        for r in rep["per_n"]
    )
    report(6, not_worse and gap_ok and _nonneg_gn(cbm), detail)
    assert not_worse
    assert gap_ok
    assert _nonneg_gn(cbm)


# criterion 7 ---------------------------------------------------------------


def _log_mean_exp_decimal(values):
    getcontext().prec = 60
    return float((sum(Decimal(repr(float(v))).exp() for v in values) / len(values)).ln())


def test_criterion_7_numerical_hygiene():
    shape = PcbmShape(2, 1, 1, 2, 0)
    truth = make_ground_truth(shape, seed=1)
    data = sample_dataset(truth, 80, seed=2)
    prior = PriorSpec()
    rng = np.random.default_rng(0)

    grad_err = 0.0
    for _ in range(5):
        w = Weights.from_flat(rng.normal(0, 1, shape.n_params), shape)
        g = grad_log_posterior(w, data, prior, 1.0).flat()
        theta = w.flat()
        for i in range(theta.size):
            e = np.zeros_like(theta)
            e[i] = 1e-5
            fd = (
                log_posterior_unnorm(Weights.from_flat(theta + e, shape), data, prior, 1.0)
                - log_posterior_unnorm(Weights.from_flat(theta - e, shape), data, prior, 1.0)
            ) / 2e-5
            grad_err = max(grad_err, abs(g[i] - fd) / max(abs(fd), 1e-3 * np.max(np.abs(g))))
    grad_ok = grad_err < 1e-4

    thetas = rng.normal(0, 2.0, (200, shape.n_params))
    draws = point_mass(truth.weights)
    draws.theta = thetas[None]  # 200 equally weighted draws
    test = sample_dataset(truth, 5, seed=3)
    lp = log_predictive(draws, test.x, test.y, test.c)
    pred_err = 0.0
    for t in range(5):
        row = (test.x[t : t + 1], test.y[t : t + 1], test.c[t : t + 1])
        per = [float(log_density(Weights.from_flat(th, shape), *row)[0]) for th in thetas]
        ref = _log_mean_exp_decimal(per)
        pred_err = max(pred_err, abs(lp[t] - ref) / max(1.0, abs(ref)))
    pred_ok = pred_err < 1e-8

    est = estimate_gen_error(point_mass(truth.weights), truth, n_test=1000, seed=4)
    gen_ok = abs(est.g_hat) <= 3 * est.std_err + 1e-15

    report(
        7,
        grad_ok and pred_ok and gen_ok,
        f"gradient rel err {grad_err:.1e} (limit 1e-4); log_predictive rel err {pred_err:.1e} (limit 1e-8); "
        f"G_n at truth {est.g_hat:.2e} +/- {est.std_err:.1e}",
    )
    assert grad_ok and pred_ok and gen_ok
