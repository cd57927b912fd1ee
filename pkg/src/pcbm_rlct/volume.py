"""Brute-force learning coefficients from the volume of small-error sets.

For an error function ``K >= 0`` with learning coefficient ``lambda`` the
volume ``V(t) = Vol{w in box : K(w) < t}`` behaves like
``c * t**lambda * (-log t)**(m - 1)`` as ``t -> 0``.  The slope of
``log V`` against ``log t`` therefore estimates ``lambda`` without using
any closed-form result.  The ``(-log t)**(m - 1)`` factor is ignored; it
biases the slope downward by roughly ``(m - 1) / (-log t)``.

Two volume estimators are available:

``uniform``
    plain Monte Carlo with uniform draws in the box.  Only usable when the
    smallest threshold still catches a reasonable fraction of draws.
``splitting``
    adaptive multilevel splitting: the population is repeatedly restricted
    to ``{K < level}`` and refreshed by constrained random-walk moves, so
    volumes many orders of magnitude below the box volume stay reachable.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import GroundTruth, averaged_error_K_batch, averaged_error_upper_batch
from .rlct import PcbmShape, RrrShape

log = logging.getLogger(__name__)

MAX_PARAMS = 8
MIN_HITS = 100
MIN_DECADES = 4.0


class WidenThresholdsError(ValueError):
    """The threshold grid is too narrow or too deep for the sample budget."""


class CurvatureWarning(UserWarning):
    """The log-log volume curve bends noticeably across the fitted range."""


@dataclass
class VolumeScalingReport:
    lambda_vol: float
    thresholds: list
    log_volume: list
    fit_r2: float
    intercept: float = 0.0
    method: str = "splitting"
    n_params: int = 0
    curvature: float = 0.0
    hits_smallest: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "lambda_vol": self.lambda_vol,
            "thresholds": list(self.thresholds),
            "log_volume": list(self.log_volume),
            "fit_r2": self.fit_r2,
            "intercept": self.intercept,
            "method": self.method,
            "n_params": self.n_params,
            "curvature": self.curvature,
            "hits_smallest": self.hits_smallest,
            **self.extra,
        }


def default_thresholds() -> np.ndarray:
    return np.logspace(-5, -11, 13)


def rrr_truth(shape: RrrShape, seed: int = 0, scale: float = 0.5) -> np.ndarray:
    """An ``M x N`` matrix of rank exactly ``shape.r`` with entries of order ``scale``."""
    rng = np.random.default_rng(seed)
    if shape.r == 0:
        return np.zeros((shape.m_out, shape.n_in))
    while True:
        u = rng.normal(0, 1, (shape.m_out, shape.r))
        v = rng.normal(0, 1, (shape.r, shape.n_in))
        prod = u @ v
        s = np.linalg.svd(prod, compute_uv=False)
        if s[shape.r - 1] > 0.3 * s[0]:
            return scale * prod / s[0]


def make_error_fn(kind, shape=None, truth=None):
    """Return ``(fn, dim)`` with ``fn`` mapping ``(k, dim)`` arrays to ``(k,)`` errors."""
    if callable(kind):
        raise TypeError("pass callables directly with an explicit dim")
    if kind == "rrr":
        if not isinstance(shape, RrrShape):
            raise TypeError("error_fn='rrr' needs an RrrShape")
        target = rrr_truth(shape) if truth is None else np.asarray(truth, dtype=float)
        m, h, n = shape.m_out, shape.h, shape.n_in

        def fn(w):
            u = w[:, : m * h].reshape(-1, m, h)
            v = w[:, m * h :].reshape(-1, h, n)
            d = u @ v - target
            return np.sum(d * d, axis=(1, 2))

        return fn, shape.n_params
    if kind in ("K", "K_bar"):
        if not isinstance(shape, PcbmShape) or not isinstance(truth, GroundTruth):
            raise TypeError(f"error_fn={kind!r} needs a PcbmShape and a GroundTruth")
        batch = averaged_error_K_batch if kind == "K" else averaged_error_upper_batch
        return (lambda w: batch(w, truth)), shape.n_params
    raise ValueError(f"unknown error function {kind!r}")


def _fit(log_t: np.ndarray, log_v: np.ndarray):
    slope, intercept = np.polyfit(log_t, log_v, 1)
    resid = log_v - (slope * log_t + intercept)
    ss_tot = np.sum((log_v - log_v.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    curv = np.polyfit(log_t, log_v, 2)[0] if log_t.size >= 3 else 0.0
    return float(slope), float(intercept), float(r2), float(curv)


def _uniform_log_volumes(fn, dim, half_width, n_samples, thresholds, rng, chunk=200_000):
    counts = np.zeros(thresholds.size, dtype=np.int64)
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        vals = fn(rng.uniform(-half_width, half_width, size=(k, dim)))
        counts += np.sum(vals[:, None] < thresholds[None, :], axis=0)
        done += k
    if counts[-1] < MIN_HITS:
        raise WidenThresholdsError(
            f"only {counts[-1]} of {n_samples} uniform draws fall below t={thresholds[-1]:g}; "
            f"widen the thresholds (need >= {MIN_HITS})"
        )
    log_box = dim * math.log(2 * half_width)
    return log_box + np.log(counts / n_samples), int(counts[-1])


def _move(particles, vals, level, fn, half_width, rng, n_moves, scale):
    """Constrained random-walk moves keeping particles uniform on ``{K < level}``."""
    k, dim = particles.shape
    base = np.maximum(particles.std(axis=0), 1e-300)
    accepted = 0
    for _ in range(n_moves):
        # log-uniform step multiplier: the sets are thin in some directions
        # and long in others, so no single scale fits every particle
        mult = scale * 10.0 ** rng.uniform(-3.0, 0.0, size=(k, 1))
        prop = particles + mult * base * rng.standard_normal((k, dim))
        inside = np.all(np.abs(prop) <= half_width, axis=1)
        pv = np.full(k, np.inf)
        if inside.any():
            pv[inside] = fn(prop[inside])
        ok = pv < level
        particles = np.where(ok[:, None], prop, particles)
        vals = np.where(ok, pv, vals)
        accepted += int(ok.sum())
    return particles, vals, accepted / (k * n_moves)


def _splitting_log_volumes(fn, dim, half_width, n_particles, thresholds, rng, p0=0.2, n_moves=25):
    particles = rng.uniform(-half_width, half_width, size=(n_particles, dim))
    vals = fn(particles)
    log_v = dim * math.log(2 * half_width)
    out = np.empty(thresholds.size)
    j = 0
    scale = 0.5
    hits = 0
    n_levels = 0
    while j < thresholds.size:
        t_next = thresholds[j]
        below = vals < t_next
        frac = below.mean()
        if frac >= p0:
            level, mask = t_next, below
            out[j] = log_v + math.log(frac)
            hits = int(mask.sum())
            j += 1
        else:
            k_keep = max(int(p0 * n_particles), 1)
            level = np.partition(vals, k_keep)[k_keep]
            mask = vals < level
            if not mask.any():
                raise WidenThresholdsError(
                    f"population collapsed above t={t_next:g}; increase n_samples"
                )
        log_v += math.log(mask.mean())
        n_levels += 1
        survivors = np.flatnonzero(mask)
        pick = survivors[rng.integers(0, survivors.size, size=n_particles)]
        particles, vals = particles[pick], vals[pick]
        particles, vals, acc = _move(particles, vals, level, fn, half_width, rng, n_moves, scale)
        scale *= math.exp(acc - 0.3)
        scale = min(max(scale, 1e-3), 2.0)
    if hits < MIN_HITS:
        raise WidenThresholdsError(
            f"only {hits} particles below t={thresholds[-1]:g}; increase n_samples or widen thresholds"
        )
    log.debug("splitting used %d levels", n_levels)
    return out, hits


def volume_scaling_lambda(
    error_fn,
    shape=None,
    truth=None,
    box_half_width: float = 1.0,
    n_samples: int = 4000,
    thresholds=None,
    seed: int = 0,
    method: str = "splitting",
    dim: int | None = None,
) -> VolumeScalingReport:
    """Estimate a learning coefficient from the scaling of ``Vol{K < t}``.

    ``error_fn`` is ``"K"``, ``"K_bar"`` (PCBM errors, needing a
    :class:`PcbmShape` and :class:`GroundTruth`), ``"rrr"`` (needing an
    :class:`RrrShape`; ``truth`` is then the target product matrix), or a
    vectorised callable together with ``dim``.
    """
    if callable(error_fn):
        if dim is None:
            raise ValueError("a callable error_fn needs dim")
        fn = error_fn
    else:
        fn, dim = make_error_fn(error_fn, shape, truth)
    if dim > MAX_PARAMS:
        raise ValueError(f"{dim} parameters exceeds the oracle limit of {MAX_PARAMS}")
    t = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=float)
    if t.ndim != 1 or t.size < 3 or np.any(t <= 0):
        raise ValueError("thresholds must be at least 3 positive numbers")
    if np.any(np.diff(t) >= 0):
        raise ValueError("thresholds must be strictly decreasing")
    if math.log10(t[0] / t[-1]) < MIN_DECADES:
        raise WidenThresholdsError(
            f"thresholds span {math.log10(t[0] / t[-1]):.2f} decades; need >= {MIN_DECADES:g}"
        )
    rng = np.random.default_rng(seed)
    if method == "uniform":
        log_v, hits = _uniform_log_volumes(fn, dim, box_half_width, n_samples, t, rng)
    elif method == "splitting":
        log_v, hits = _splitting_log_volumes(fn, dim, box_half_width, n_samples, t, rng)
    else:
        raise ValueError(f"unknown method {method!r}")
    slope, intercept, r2, curv = _fit(np.log(t), log_v)
    if abs(curv) * np.ptp(np.log(t)) > 0.1:
        warnings.warn(
            f"log-log volume curve bends (quadratic coefficient {curv:.3g}); "
            "a multiplicity factor may bias the slope",
            CurvatureWarning,
            stacklevel=2,
        )
    return VolumeScalingReport(
        lambda_vol=slope,
        thresholds=[float(v) for v in t],
        log_volume=[float(v) for v in log_v],
        fit_r2=r2,
        intercept=intercept,
        method=method,
        n_params=dim,
        curvature=curv,
        hits_smallest=hits,
    )
