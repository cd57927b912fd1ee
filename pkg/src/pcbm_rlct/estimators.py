"""Generalization error, empirical learning coefficients and free-energy checks."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .model import (
    Dataset,
    GroundTruth,
    log_normaliser,
    sample_inputs,
    unflatten_batch,
)
from .sampler import PcbmTarget, PosteriorDraws, PriorSpec, SamplerConfig, run_chain, with_beta

log = logging.getLogger(__name__)

WBIC_RHAT_LIMIT = 1.2


@dataclass(frozen=True)
class GenErrorEstimate:
    g_hat: float
    std_err: float
    n: int
    n_test: int
    n_draws: int


@dataclass(frozen=True)
class RlctEstimate:
    lambda_hat: float
    std_err: float
    method: str
    n_grid: list = field(default_factory=list)
    reliable: bool = True


def _draw_means(draws: PosteriorDraws, x: np.ndarray):
    """Per-draw predictive means of ``y`` and ``c``: ``(S, T, M)`` and ``(S, T, H2)``."""
    shape = draws.shape
    a, b = unflatten_batch(draws.flat_theta, shape)
    w = a @ b
    b2 = b[:, shape.h1 :, :]
    return np.einsum("smn,tn->stm", w, x), np.einsum("shn,tn->sth", b2, x)


def _log_lik_matrix(draws: PosteriorDraws, x, y, c) -> np.ndarray:
    """``log p(y_t, c_t | w_s, x_t)`` as an ``(S, T)`` array."""
    my, mc = _draw_means(draws, x)
    ry = y[None] - my
    rc = c[None] - mc
    sq = np.sum(ry * ry, axis=-1) + np.sum(rc * rc, axis=-1)
    return -0.5 * sq - log_normaliser(draws.shape)


def log_predictive(draws: PosteriorDraws, x, y, c):
    """Log of the posterior-averaged density ``mean_s p(y, c | w_s, x)``.

    Accepts a single observation (1-d arrays) or rows of observations.
    """
    if draws.n_draws == 0:
        raise ValueError("no posterior draws")
    single = np.ndim(x) == 1
    x, y, c = np.atleast_2d(x), np.atleast_2d(y), np.atleast_2d(c)
    ll = _log_lik_matrix(draws, x, y, c)
    out = logsumexp(ll, axis=0) - math.log(ll.shape[0])
    return float(out[0]) if single else out


def estimate_gen_error(
    draws: PosteriorDraws,
    truth: GroundTruth,
    n_test: int = 1000,
    seed: int = 0,
    antithetic: bool = True,
    batch: int = 256,
) -> GenErrorEstimate:
    """Monte-Carlo estimate of ``G_n = E_{x,y,c}[log q(y,c|x) - log p*(y,c|x)]``.

    Test triples are drawn fresh from the truth.  With ``antithetic=True``
    the noise of every second triple is the negation of the previous one
    (same ``x``), which cancels the leading odd term of the log-ratio; each
    triple is still marginally a draw from the truth, so the mean stays
    unbiased.  The standard error is computed over pair averages.
    """
    if n_test < 2:
        raise ValueError("n_test must be >= 2")
    shape = truth.shape
    rng = np.random.default_rng(seed)
    n_units = n_test // 2 if antithetic else n_test
    x = sample_inputs(rng, n_units, shape.n_in)
    ey = rng.standard_normal((n_units, shape.m_out))
    ec = rng.standard_normal((n_units, shape.h2))
    my0, mc0 = x @ truth.product.T, x @ truth.b2.T
    signs = (1.0, -1.0) if antithetic else (1.0,)
    per_unit = np.zeros(n_units)
    for sgn in signs:
        y, c = my0 + sgn * ey, mc0 + sgn * ec
        log_q = -0.5 * (np.sum(ey * ey, axis=1) + np.sum(ec * ec, axis=1)) - log_normaliser(shape)
        log_p = np.concatenate(
            [log_predictive(draws, x[i : i + batch], y[i : i + batch], c[i : i + batch])
             for i in range(0, n_units, batch)]
        )
        per_unit += (log_q - log_p) / len(signs)
    return GenErrorEstimate(
        g_hat=float(per_unit.mean()),
        std_err=float(per_unit.std(ddof=1) / math.sqrt(n_units)),
        n=draws.n,
        n_test=n_units * len(signs),
        n_draws=draws.n_draws,
    )


def fit_lambda_slope(per_n_means) -> RlctEstimate:
    """Weighted fit of ``n * mean_g`` to a constant.

    ``per_n_means`` holds ``(n, mean_g, stderr)`` triples.  Weights are
    ``1 / (n * stderr)^2``; when every standard error is zero the points are
    weighted equally.
    """
    rows = sorted((int(n), float(g), float(s)) for n, g, s in per_n_means)
    if len({r[0] for r in rows}) < 3:
        raise ValueError("need at least 3 distinct n values")
    n = np.array([r[0] for r in rows], dtype=float)
    y = n * np.array([r[1] for r in rows])
    se = n * np.array([r[2] for r in rows])
    if np.all(se == 0):
        lam = float(y.mean())
        return RlctEstimate(lam, 0.0, "slope_fit", [int(v) for v in n])
    if np.any(se <= 0):
        raise ValueError("standard errors must be positive")
    w = 1.0 / se**2
    lam = float(np.sum(w * y) / np.sum(w))
    return RlctEstimate(lam, float(1.0 / math.sqrt(np.sum(w))), "slope_fit", [int(v) for v in n])


def wbic_betas(n: int) -> tuple[float, float]:
    return 1.0 / math.log(n), 1.0 / (2.0 * math.log(n))


def lambda_from_tempered_means(e1: float, e2: float, beta1: float, beta2: float) -> float:
    """``(E^b1[nL_n] - E^b2[nL_n]) / (1/b1 - 1/b2)``."""
    if beta1 == beta2:
        raise ValueError("the two inverse temperatures must differ")
    return (e1 - e2) / (1.0 / beta1 - 1.0 / beta2)


def estimate_lambda_wbic(
    data: Dataset | None,
    prior: PriorSpec,
    config: SamplerConfig,
    n: int | None = None,
    shape=None,
    betas: tuple[float, float] | None = None,
    target=None,
) -> RlctEstimate:
    """Two-temperature learning-coefficient estimate.

    Runs tempered chains at ``beta1 = 1/log n`` and ``beta2 = 1/(2 log n)``
    and compares the mean of ``n L_n`` under each.  The standard error comes
    from the ESS-corrected variances of the two means.
    """
    if target is None:
        target = PcbmTarget(data, shape)
    n = n or target.n
    b1, b2 = betas or wbic_betas(n)
    if b1 == b2:
        raise ValueError("the two inverse temperatures must differ")
    means, variances, reliable = [], [], True
    for i, beta in enumerate((b1, b2)):
        cfg = with_beta(config, beta)
        cfg = type(cfg)(**{**cfg.to_json(), "seed": config.seed + i})
        draws = run_chain(data, shape, prior, cfg, target=target)
        vals = draws.nll.ravel()
        ess = max(draws.diagnostics.get("nll", {}).get("ess", vals.size), 1.0)
        means.append(float(vals.mean()))
        variances.append(float(vals.var(ddof=1) / ess))
        if draws.rhat_max >= WBIC_RHAT_LIMIT:
            reliable = False
            log.warning("tempered chain at beta=%.4g not converged (rhat_max=%.3f)", beta, draws.rhat_max)
    denom = 1.0 / b1 - 1.0 / b2
    lam = lambda_from_tempered_means(means[0], means[1], b1, b2)
    se = math.sqrt(variances[0] + variances[1]) / abs(denom)
    return RlctEstimate(lam, se, "wbic_two_temp", [int(n)], reliable)
