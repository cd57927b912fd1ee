"""Seeded (n, replication) sweeps of the Bayesian generalization error."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .estimators import estimate_gen_error, fit_lambda_slope
from .model import make_ground_truth, sample_dataset
from .rlct import PcbmShape, gen_error_gap_lower, rlct_cbm, rlct_pcbm_upper
from .sampler import PriorSpec, SamplerConfig, run_chain
from .svg import line_plot

log = logging.getLogger(__name__)

RHAT_FLAG = 1.2
FLAGGED_FRACTION_LIMIT = 0.2
SWEEP_HEADER = [
    "shape_id",
    "n",
    "replication",
    "g_hat",
    "std_err",
    "accept_rate",
    "rhat_max",
    "flagged",
    "wall_time_ms",
]

# stream labels for derive_seed
STREAM_TRUTH, STREAM_DATA, STREAM_CHAINS, STREAM_TEST = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


def derive_seed(master_seed: int, *keys: int) -> int:
    """64-bit child seed from a master seed and a tuple of integer counters."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    shape: PcbmShape
    truth_scale: float = 1.0
    n_grid: tuple = (100, 200, 400, 800)
    replications: int = 50
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    prior: PriorSpec = field(default_factory=PriorSpec)
    n_test: int = 1000
    out_dir: Path = Path("runs/sweep")
    master_seed: int = 0

    def __post_init__(self):
        grid = list(self.n_grid)
        if not grid or any(int(v) < 1 for v in grid):
            raise ConfigError("n_grid must be a non-empty list of positive integers")
        if any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("n_grid must be strictly increasing")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if not self.truth_scale > 0:
            raise ConfigError("truth_scale must be positive")
        if self.n_test < 2:
            raise ConfigError("n_test must be >= 2")
        if not 0 <= self.master_seed < 2**64:
            raise ConfigError("master_seed must be a 64-bit unsigned integer")

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "shape" not in d:
            raise ConfigError("config needs a 'shape'")
        try:
            shape = PcbmShape(**d["shape"])
            sampler = SamplerConfig(**d.get("sampler", {}))
            prior = PriorSpec(**d.get("prior", {}))
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        out_dir = Path(d.get("out_dir", "runs/sweep"))
        if base_dir is not None and not out_dir.is_absolute():
            out_dir = base_dir / out_dir
        return cls(
            shape=shape,
            truth_scale=float(d.get("truth_scale", 1.0)),
            n_grid=tuple(int(v) for v in d.get("n_grid", (100, 200, 400, 800))),
            replications=int(d.get("replications", 50)),
            sampler=sampler,
            prior=prior,
            n_test=int(d.get("n_test", 1000)),
            out_dir=out_dir,
            master_seed=int(d.get("master_seed", 0)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(d, base_dir=path.parent)

    def to_dict(self) -> dict:
        return {
            "shape": asdict(self.shape),
            "truth_scale": self.truth_scale,
            "n_grid": list(self.n_grid),
            "replications": self.replications,
            "sampler": self.sampler.to_json(),
            "prior": asdict(self.prior),
            "n_test": self.n_test,
            "out_dir": str(self.out_dir),
            "master_seed": self.master_seed,
        }

    def truth(self):
        return make_ground_truth(self.shape, self.truth_scale, derive_seed(self.master_seed, STREAM_TRUTH))


@dataclass(frozen=True)
class SweepRecord:
    shape_id: str
    n: int
    replication: int
    g_hat: float
    std_err: float
    accept_rate: float
    rhat_max: float
    flagged: bool
    wall_time_ms: int

    def row(self) -> list:
        return [
            self.shape_id,
            str(self.n),
            str(self.replication),
            repr(self.g_hat),
            repr(self.std_err),
            repr(self.accept_rate),
            repr(self.rhat_max),
            str(int(self.flagged)),
            str(self.wall_time_ms),
        ]

    @classmethod
    def from_row(cls, row: dict) -> "SweepRecord":
        return cls(
            shape_id=row["shape_id"],
            n=int(row["n"]),
            replication=int(row["replication"]),
            g_hat=float(row["g_hat"]),
            std_err=float(row["std_err"]),
            accept_rate=float(row["accept_rate"]),
            rhat_max=float(row["rhat_max"]),
            flagged=bool(int(row["flagged"])),
            wall_time_ms=int(row["wall_time_ms"]),
        )


def run_cell(config: ExperimentConfig, n: int, replication: int, timing: bool = True) -> SweepRecord:
    """One replication at one sample size: fresh data, posterior run, G_n estimate."""
    start = time.perf_counter()
    truth = config.truth()
    data = sample_dataset(truth, n, derive_seed(config.master_seed, n, replication, STREAM_DATA))
    sampler = SamplerConfig(
        **{**config.sampler.to_json(), "seed": derive_seed(config.master_seed, n, replication, STREAM_CHAINS)}
    )
    draws = run_chain(data, config.shape, config.prior, sampler, truth=truth)
    est = estimate_gen_error(
        draws, truth, config.n_test, seed=derive_seed(config.master_seed, n, replication, STREAM_TEST)
    )
    elapsed = int(round(1000 * (time.perf_counter() - start))) if timing else 0
    if not math.isfinite(est.g_hat):
        raise RuntimeError(f"non-finite G_n estimate at n={n}, replication={replication}")
    return SweepRecord(
        shape_id=config.shape.shape_id,
        n=n,
        replication=replication,
        g_hat=est.g_hat,
        std_err=est.std_err,
        accept_rate=draws.accept_rate,
        rhat_max=draws.rhat_max,
        flagged=draws.rhat_max >= RHAT_FLAG,
        wall_time_ms=elapsed,
    )


def read_sweep_csv(path) -> list[SweepRecord]:
    path = Path(path)
    if not path.exists():
        return []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != SWEEP_HEADER:
            raise ConfigError(f"{path} does not have the expected sweep header")
        return [SweepRecord.from_row(r) for r in reader]


def write_sweep_csv(path, records) -> None:
    records = sorted(records, key=lambda r: (r.n, r.replication))
    tmp = Path(path).with_suffix(".csv.tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in records:
            w.writerow(r.row())
    tmp.replace(path)


def summarize(config: ExperimentConfig, records) -> dict:
    """Per-n means over unflagged replications plus the slope fit.

    Everything here is recomputable from the sweep CSV rows.
    """
    shape = config.shape
    by_n: dict[int, list[SweepRecord]] = {}
    for r in records:
        by_n.setdefault(r.n, []).append(r)
    per_n = []
    excluded = 0
    for n in sorted(by_n):
        rows = sorted(by_n[n], key=lambda r: r.replication)
        kept = [r.g_hat for r in rows if not r.flagged]
        excluded += len(rows) - len(kept)
        k = len(kept)
        mean_g = float(np.mean(kept)) if k else float("nan")
        stderr = float(np.std(kept, ddof=1) / math.sqrt(k)) if k > 1 else float("nan")
        per_n.append(
            {
                "n": n,
                "replications": k,
                "mean_g": mean_g,
                "stderr": stderr,
                "n_times_mean_g": n * mean_g,
                "n_times_stderr": n * stderr,
            }
        )
    summary = {
        "shape": asdict(shape),
        "shape_id": shape.shape_id,
        "lambda_bound": float(rlct_pcbm_upper(shape)),
        "lambda_bound_exact": str(rlct_pcbm_upper(shape)),
        "lambda_cbm": float(rlct_cbm(shape.n_in, shape.h, shape.m_out)),
        "gap_lower": float(gen_error_gap_lower(shape)),
        "per_n": per_n,
        "n_records": len(records),
        "excluded_flagged": excluded,
    }
    usable = [p for p in per_n if p["replications"] > 1 and p["stderr"] > 0]
    if len(usable) >= 3:
        fit = fit_lambda_slope([(p["n"], p["mean_g"], p["stderr"]) for p in usable])
        summary["lambda_hat"] = fit.lambda_hat
        summary["lambda_hat_stderr"] = fit.std_err
    return summary


def flagged_fraction(records) -> float:
    return sum(r.flagged for r in records) / len(records) if records else 0.0


def run_sweep(config: ExperimentConfig, jobs: int = 1, timing: bool = True, progress=None) -> dict:
    """Run (or resume) a sweep and write ``sweep.csv``, ``summary.json`` and ``config.echo.json``.

    Cells already present in ``sweep.csv`` are skipped.  Rows are always
    rewritten sorted by ``(n, replication)``, so the file does not depend on
    execution order.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "sweep.csv"
    echo = json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"
    echo_path = out / "config.echo.json"
    if echo_path.exists() and csv_path.exists():
        previous = json.loads(echo_path.read_text())
        current = json.loads(echo)
        previous.pop("out_dir", None)
        current.pop("out_dir", None)
        if previous != current:
            raise ConfigError(f"{out} holds a sweep for a different config; use a new out_dir")
    echo_path.write_text(echo)

    records = {(r.n, r.replication): r for r in read_sweep_csv(csv_path)}
    todo = [
        (n, rep)
        for n in config.n_grid
        for rep in range(config.replications)
        if (n, rep) not in records
    ]
    log.info("%s: %d cells done, %d to run", config.shape.shape_id, len(records), len(todo))

    def commit(rec: SweepRecord):
        records[(rec.n, rec.replication)] = rec
        # checkpoint so an interrupted sweep can resume
        if len(records) % 10 == 0:
            write_sweep_csv(csv_path, records.values())
        if progress:
            progress(rec)

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, config, n, rep, timing) for n, rep in todo]
            for fut in as_completed(futures):
                commit(fut.result())
    else:
        for n, rep in todo:
            commit(run_cell(config, n, rep, timing))

    write_sweep_csv(csv_path, records.values())
    summary = summarize(config, list(records.values()))
    summary["flagged_fraction"] = flagged_fraction(list(records.values()))
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def compare_sweeps(pcbm: ExperimentConfig, cbm: ExperimentConfig, out_dir=None) -> dict:
    """Per-n comparison of a PCBM sweep against a fully supervised CBM sweep."""
    sp, sc = pcbm.shape, cbm.shape
    if (sp.n_in, sp.h, sp.m_out) != (sc.n_in, sc.h, sc.m_out):
        raise ConfigError(
            f"shape mismatch: PCBM (N={sp.n_in}, H={sp.h}, M={sp.m_out}) vs "
            f"CBM (N={sc.n_in}, H={sc.h}, M={sc.m_out})"
        )
    if sc.h1 != 0:
        raise ConfigError("the CBM sweep must supervise every hidden unit (h1 = 0)")
    rec_p = read_sweep_csv(Path(pcbm.out_dir) / "sweep.csv")
    rec_c = read_sweep_csv(Path(cbm.out_dir) / "sweep.csv")
    if not rec_p or not rec_c:
        raise ConfigError("both sweeps must be completed before comparing")
    sum_p, sum_c = summarize(pcbm, rec_p), summarize(cbm, rec_c)
    gap = gen_error_gap_lower(sp)
    by_c = {p["n"]: p for p in sum_c["per_n"]}
    rows = []
    for p in sum_p["per_n"]:
        c = by_c.get(p["n"])
        if c is None:
            continue
        diff = c["mean_g"] - p["mean_g"]
        sigma = math.sqrt(p["stderr"] ** 2 + c["stderr"] ** 2)
        bound = float(gap) / p["n"]
        rows.append(
            {
                "n": p["n"],
                "mean_g_pcbm": p["mean_g"],
                "mean_g_cbm": c["mean_g"],
                "stderr_pcbm": p["stderr"],
                "stderr_cbm": c["stderr"],
                "difference": diff,
                "difference_stderr": sigma,
                "gap_lower_bound": bound,
                "pcbm_not_worse": bool(p["mean_g"] <= c["mean_g"] + 2 * sigma),
                "gap_meets_bound": bool(diff >= bound - 2 * sigma),
            }
        )
    report = {
        "pcbm_shape": sp.shape_id,
        "cbm_shape": sc.shape_id,
        "lambda_bound": float(rlct_pcbm_upper(sp)),
        "lambda_cbm": float(rlct_cbm(sc.n_in, sc.h, sc.m_out)),
        "gap_lower": float(gap),
        "per_n": rows,
        "pass": bool(rows) and all(r["pcbm_not_worse"] and r["gap_meets_bound"] for r in rows),
    }
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "compare.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
        ns = [r["n"] for r in rows]
        series = [
            ("PCBM n*G", ns, [r["n"] * r["mean_g_pcbm"] for r in rows], [2 * r["n"] * r["stderr_pcbm"] for r in rows]),
            ("CBM n*G", ns, [r["n"] * r["mean_g_cbm"] for r in rows], [2 * r["n"] * r["stderr_cbm"] for r in rows]),
        ]
        hlines = [("PCBM bound", report["lambda_bound"]), ("CBM RLCT", report["lambda_cbm"])]
        (out_dir / "compare.svg").write_text(
            line_plot(series, hlines=hlines, xlabel="n", ylabel="n * mean G_n", logx=True,
                      title=f"{sp.shape_id} vs {sc.shape_id}")
        )
    return report
