"""Tempered posterior sampling over the PCBM weights with MALA.

The target is

    pi_beta(w) ∝ exp(-beta * n L_n(w)) * phi(w),

with ``beta = 1`` the ordinary Bayesian posterior.  All chains are advanced
together as one ``(n_chains, dim)`` array; each chain owns its random stream
and step size, so a chain's trajectory depends only on its own seed.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import optimize

from .diagnostics import effective_sample_size, split_rhat
from .model import Dataset, GroundTruth, PcbmShape, Weights, log_normaliser, unflatten_batch

log = logging.getLogger(__name__)

DIVERGENCE_NLL = 1e12
INIT_RESTARTS = 8


class SamplerDivergenceError(RuntimeError):
    """A chain reached a negative log-likelihood above the divergence guard."""


@dataclass(frozen=True)
class PriorSpec:
    kind: str = "gaussian"
    sigma: float = 10.0
    half_width: float = 20.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "uniform_box"):
            raise ValueError(f"unknown prior kind {self.kind!r}")
        if not (self.sigma > 0 and self.half_width > 0):
            raise ValueError("sigma and half_width must be positive")

    def log_density(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        dim = theta.shape[-1]
        if self.kind == "gaussian":
            return -0.5 * np.sum(theta * theta, axis=-1) / self.sigma**2 - dim * (
                math.log(self.sigma) + 0.5 * math.log(2 * math.pi)
            )
        inside = np.all(np.abs(theta) <= self.half_width, axis=-1)
        return np.where(inside, -dim * math.log(2 * self.half_width), -np.inf)

    def grad_log_density(self, theta: np.ndarray) -> np.ndarray:
        if self.kind == "gaussian":
            return -np.asarray(theta, dtype=float) / self.sigma**2
        return np.zeros_like(theta, dtype=float)

    def sample(self, rng: np.random.Generator, dim: int) -> np.ndarray:
        if self.kind == "gaussian":
            return rng.normal(0.0, self.sigma, size=dim)
        return rng.uniform(-self.half_width, self.half_width, size=dim)


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 4
    n_steps: int = 3000
    burn_in: int = 1000
    thin: int = 1
    step_size: float = 0.05
    adapt: bool = True
    target_accept: float = 0.574
    beta: float = 1.0
    seed: int = 0
    kernel: str = "mala"
    init: str = "prior_mode"
    precondition: bool = True

    def __post_init__(self):
        if self.n_chains < 1 or self.n_steps < 1 or self.thin < 1:
            raise ValueError("n_chains, n_steps and thin must be positive")
        if not 0 <= self.burn_in < self.n_steps:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_steps")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must lie in (0, 1)")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.kernel not in ("mala", "rwm"):
            raise ValueError(f"unknown kernel {self.kernel!r}")
        if self.init not in ("prior", "prior_mode", "truth"):
            raise ValueError(f"unknown init {self.init!r}")

    def to_json(self) -> dict:
        return asdict(self)


class PcbmTarget:
    """Negative log-likelihood of the linear PCBM, vectorised over parameter rows.

    Uses the sufficient statistics of the dataset so every evaluation costs
    O(dim) regardless of ``n``.
    """

    def __init__(self, data: Dataset, shape: PcbmShape):
        if data.x.shape[1] != shape.n_in or data.y.shape[1] != shape.m_out or data.c.shape[1] != shape.h2:
            raise ValueError(f"dataset does not match {shape.shape_id}")
        self.shape = shape
        self.n = data.n
        self.dim = shape.n_params
        st = data.stats
        self._xx, self._yx, self._cx = st["xx"], st["yx"], st["cx"]
        self._yy, self._cc = st["yy"], st["cc"]
        self._const = self.n * log_normaliser(shape)

    def neg_log_lik(self, theta: np.ndarray) -> np.ndarray:
        a, b = unflatten_batch(np.asarray(theta, dtype=float), self.shape)
        w = a @ b
        b2 = b[..., self.shape.h1 :, :]
        quad_y = np.sum((w @ self._xx) * w, axis=(-2, -1)) - 2 * np.sum(w * self._yx, axis=(-2, -1))
        quad_c = np.sum((b2 @ self._xx) * b2, axis=(-2, -1)) - 2 * np.sum(b2 * self._cx, axis=(-2, -1))
        return 0.5 * (quad_y + self._yy + quad_c + self._cc) + self._const

    def grad_neg_log_lik(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        a, b = unflatten_batch(theta, self.shape)
        w = a @ b
        gw = w @ self._xx - self._yx
        ga = gw @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ gw
        h1 = self.shape.h1
        gb[..., h1:, :] += b[..., h1:, :] @ self._xx - self._cx
        lead = theta.shape[:-1]
        return np.concatenate([ga.reshape(*lead, -1), gb.reshape(*lead, -1)], axis=-1)

    def functionals(self, theta: np.ndarray, truth: GroundTruth | None = None) -> dict:
        """Scalar summaries used for convergence diagnostics.

        Entries of ``AB`` and ``B2`` are identified by the likelihood; raw
        entries of ``A`` or ``B1`` are not (they slide along the zero set), so
        they are deliberately left out.
        """
        a, b = unflatten_batch(theta, self.shape)
        w = a @ b
        out = {"nll": self.neg_log_lik(theta)}
        if truth is not None:
            d = w - truth.product
            e = b[..., self.shape.h1 :, :] - truth.b2
            out["K"] = np.sum(d * d, axis=(-2, -1)) + np.sum(e * e, axis=(-2, -1))
        out["AB[0,0]"] = w[..., 0, 0]
        out[f"AB[{w.shape[-2] - 1},{w.shape[-1] - 1}]"] = w[..., -1, -1]
        out["B2[0,0]"] = b[..., self.shape.h1, 0]
        return out


class GaussianMeanTarget:
    """One-parameter regular model ``y_i ~ N(mu, 1)``; used for calibration."""

    def __init__(self, y: np.ndarray):
        y = np.asarray(y, dtype=float).ravel()
        self.n = y.size
        self.dim = 1
        self._sum, self._sq = float(y.sum()), float(np.sum(y * y))

    def neg_log_lik(self, theta):
        mu = np.asarray(theta, dtype=float)[..., 0]
        return 0.5 * (self._sq - 2 * mu * self._sum + self.n * mu * mu) + 0.5 * self.n * math.log(2 * math.pi)

    def grad_neg_log_lik(self, theta):
        mu = np.asarray(theta, dtype=float)[..., :1]
        return self.n * mu - self._sum

    def functionals(self, theta, truth=None):
        return {"nll": self.neg_log_lik(theta), "mu": np.asarray(theta)[..., 0]}


def log_posterior_unnorm(w: Weights, data: Dataset, prior: PriorSpec, beta: float) -> float:
    """``-beta * n L_n(w) + log phi(w)`` (additive constant not removed)."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    theta = w.flat()
    lp = float(prior.log_density(theta))
    if beta == 0:
        return lp
    return -beta * float(PcbmTarget(data, w.shape).neg_log_lik(theta)) + lp


def grad_log_posterior(w: Weights, data: Dataset, prior: PriorSpec, beta: float) -> Weights:
    theta = w.flat()
    g = -beta * PcbmTarget(data, w.shape).grad_neg_log_lik(theta) + prior.grad_log_density(theta)
    return Weights.from_flat(g, w.shape)


@dataclass
class PosteriorDraws:
    """Post burn-in, thinned draws with run diagnostics.

    ``theta`` has shape ``(n_chains, n_kept, dim)``.
    """

    theta: np.ndarray
    nll: np.ndarray
    shape: PcbmShape | None
    accept_rate: float
    ess_min: float
    rhat_max: float
    beta: float
    n: int
    epsilon_final: np.ndarray = field(default_factory=lambda: np.zeros(0))
    diagnostics: dict = field(default_factory=dict)

    @property
    def flat_theta(self) -> np.ndarray:
        return self.theta.reshape(-1, self.theta.shape[-1])

    @property
    def n_draws(self) -> int:
        return self.theta.shape[0] * self.theta.shape[1]

    @property
    def samples(self) -> list[Weights]:
        return [Weights.from_flat(t, self.shape) for t in self.flat_theta]

    def diagnostics_record(self) -> dict:
        return {
            "accept_rate": self.accept_rate,
            "rhat_max": self.rhat_max,
            "ess_min": self.ess_min,
            "beta": self.beta,
            "epsilon_final": [float(e) for e in self.epsilon_final],
        }

    def save(self, stem) -> tuple[Path, Path]:
        """Write ``<stem>.csv`` (chain,step,param_index,value) and ``<stem>.json``."""
        stem = Path(stem)
        csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
        c, k, d = self.theta.shape
        with open(csv_path, "w") as fh:
            fh.write("chain,step,param_index,value\n")
            for ci in range(c):
                for si in range(k):
                    for pi in range(d):
                        fh.write(f"{ci},{si},{pi},{float(self.theta[ci, si, pi])!r}\n")
        json_path.write_text(json.dumps(self.diagnostics_record(), indent=2))
        return csv_path, json_path


def point_mass(w: Weights, n: int = 0) -> PosteriorDraws:
    """A degenerate posterior concentrated on a single weight."""
    theta = w.flat()[None, None, :]
    return PosteriorDraws(theta, np.zeros((1, 1)), w.shape, 1.0, 1.0, 1.0, 1.0, n)


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    return [np.random.SeedSequence(entropy=seed, spawn_key=(ci,)) for ci in range(n_chains)]


def _descend(target, prior: PriorSpec, beta: float, theta0: np.ndarray) -> np.ndarray:
    """Move a prior draw to a nearby mode of the tempered posterior.

    Singular likelihood valleys are badly conditioned, and MALA started far
    out in the prior tail can spend its whole budget crawling along them.
    """

    def f(th):
        nll = float(target.neg_log_lik(th))
        g = beta * target.grad_neg_log_lik(th) - prior.grad_log_density(th)
        return beta * nll - float(prior.log_density(th)), g

    bounds = None
    if prior.kind == "uniform_box":
        bounds = [(-prior.half_width, prior.half_width)] * theta0.size
    res = optimize.minimize(f, theta0, jac=True, method="L-BFGS-B", bounds=bounds)
    return res.x


def _metric_windows(burn_in: int) -> list[tuple[int, int]]:
    """Burn-in windows whose draws re-estimate the proposal covariance."""
    if burn_in < 100:
        return []
    cuts = [int(burn_in * f) for f in (0.15, 0.4, 0.85)]
    return [(cuts[0], cuts[1]), (cuts[1], cuts[2])]


def _metric_from_draws(draws: np.ndarray) -> np.ndarray:
    """Regularised per-chain covariance Cholesky factors from ``(chains, k, dim)`` draws."""
    nc, k, dim = draws.shape
    out = np.empty((nc, dim, dim))
    for ci in range(nc):
        cov = np.atleast_2d(np.cov(draws[ci], rowvar=False))
        # shrink toward a small multiple of the identity, as in Stan's warm-up
        cov = (k / (k + 5.0)) * cov + 1e-3 * (5.0 / (k + 5.0)) * np.eye(dim)
        out[ci] = np.linalg.cholesky(cov)
    return out


def _best_mode(target, prior, beta, theta0, rng, restarts: int = INIT_RESTARTS):
    """Best of several prior-draw descents; guards against sign-flipped local modes."""
    starts = [theta0] + [prior.sample(rng, theta0.size) for _ in range(restarts - 1)]
    best, best_val = None, np.inf
    for th in starts:
        x = _descend(target, prior, beta, th)
        val = beta * float(target.neg_log_lik(x)) - float(prior.log_density(x))
        if val < best_val:
            best, best_val = x, val
    return best


def run_chain(
    data: Dataset | None,
    shape: PcbmShape | None,
    prior: PriorSpec,
    config: SamplerConfig,
    truth: GroundTruth | None = None,
    target=None,
) -> PosteriorDraws:
    """Run ``config.n_chains`` MALA (or random-walk Metropolis) chains.

    During burn-in each chain adapts ``log epsilon`` by Robbins-Monro toward
    ``config.target_accept``; afterwards the step is frozen so the kept draws
    come from a fixed reversible kernel.

    ``target`` overrides the PCBM likelihood built from ``data``; it must
    expose ``n``, ``dim``, ``neg_log_lik``, ``grad_neg_log_lik`` and
    ``functionals``.
    """
    if target is None:
        target = PcbmTarget(data, shape)
    if config.init == "truth" and truth is None:
        raise ValueError("init='truth' requires the ground truth")
    beta = config.beta
    dim, nc = target.dim, config.n_chains
    rngs = [np.random.default_rng(s) for s in chain_seeds(config.seed, nc)]

    if config.init == "truth":
        theta = np.tile(truth.weights.flat(), (nc, 1))
    else:
        theta = np.stack([prior.sample(r, dim) for r in rngs])
        if config.init == "prior_mode":
            theta = np.stack(
                [_best_mode(target, prior, beta, th, r) for th, r in zip(theta, rngs)]
            )
    mala = config.kernel == "mala"

    def evaluate(th):
        nll = target.neg_log_lik(th)
        logp = -beta * nll + prior.log_density(th)
        grad = -beta * target.grad_neg_log_lik(th) + prior.grad_log_density(th) if mala else None
        return nll, logp, grad

    nll, logp, grad = evaluate(theta)
    log_eps = np.full(nc, math.log(config.step_size))
    # per-chain Cholesky factor of the proposal metric
    chol = np.tile(np.eye(dim), (nc, 1, 1))
    chol_inv = chol.copy()
    windows = _metric_windows(config.burn_in) if (config.adapt and config.precondition) else []
    window_draws: list[np.ndarray] = []
    t_adapt = 0
    kept_theta, kept_nll = [], []
    n_accept = np.zeros(nc)
    n_post = 0

    def apply(mat, v):
        return np.einsum("cij,cj->ci", mat, v)

    for t in range(config.n_steps):
        eps = np.exp(log_eps)[:, None]
        xi = np.stack([r.standard_normal(dim) for r in rngs])
        u = np.array([r.random() for r in rngs])
        if mala:
            drift = apply(chol, apply(np.swapaxes(chol, 1, 2), grad))
            prop = theta + 0.5 * eps**2 * drift + eps * apply(chol, xi)
        else:
            prop = theta + eps * apply(chol, xi)
        p_nll, p_logp, p_grad = evaluate(prop)
        log_alpha = p_logp - logp
        if mala:
            p_drift = apply(chol, apply(np.swapaxes(chol, 1, 2), p_grad))
            fwd = apply(chol_inv, prop - theta - 0.5 * eps**2 * drift)
            bwd = apply(chol_inv, theta - prop - 0.5 * eps**2 * p_drift)
            log_alpha += (np.sum(fwd * fwd, axis=1) - np.sum(bwd * bwd, axis=1)) / (2 * eps[:, 0] ** 2)
        log_alpha = np.where(np.isnan(log_alpha), -np.inf, log_alpha)
        accept = np.log(u) < log_alpha
        theta = np.where(accept[:, None], prop, theta)
        nll = np.where(accept, p_nll, nll)
        logp = np.where(accept, p_logp, logp)
        if mala:
            grad = np.where(accept[:, None], p_grad, grad)
        if np.any(nll > DIVERGENCE_NLL) or not np.all(np.isfinite(nll)):
            raise SamplerDivergenceError(
                f"n*L_n exceeded {DIVERGENCE_NLL:g} at step {t}; step size too large"
            )

        if t < config.burn_in:
            if not config.adapt:
                continue
            alpha = np.exp(np.minimum(log_alpha, 0.0))
            t_adapt += 1
            log_eps += t_adapt**-0.6 * (alpha - config.target_accept)
            for lo, hi in windows:
                if lo <= t < hi:
                    window_draws.append(theta.copy())
                if t == hi - 1:
                    chol = _metric_from_draws(np.stack(window_draws, axis=1))
                    chol_inv = np.linalg.inv(chol)
                    window_draws = []
                    t_adapt = 0
                    grad_scale = np.sqrt(np.mean(np.einsum("cii->ci", chol) ** 2, axis=1))
                    log_eps = log_eps - np.log(grad_scale)
        else:
            n_accept += accept
            n_post += 1
            if (t - config.burn_in) % config.thin == 0:
                kept_theta.append(theta.copy())
                kept_nll.append(nll.copy())

    thetas = np.stack(kept_theta, axis=1)
    nlls = np.stack(kept_nll, axis=1)
    accept_rate = float(n_accept.sum() / (nc * n_post))

    funcs = target.functionals(thetas, truth)
    rhat_max, ess_min, per = 1.0, float(thetas.shape[0] * thetas.shape[1]), {}
    if thetas.shape[1] >= 4:
        for name, vals in funcs.items():
            r, e = split_rhat(vals), effective_sample_size(vals)
            per[name] = {"rhat": r, "ess": e}
        rhat_max = max(v["rhat"] for v in per.values())
        ess_min = min(v["ess"] for v in per.values())
    log.debug("chains done: accept=%.3f rhat_max=%.3f ess_min=%.1f", accept_rate, rhat_max, ess_min)
    return PosteriorDraws(
        theta=thetas,
        nll=nlls,
        shape=getattr(target, "shape", shape),
        accept_rate=accept_rate,
        ess_min=ess_min,
        rhat_max=rhat_max,
        beta=beta,
        n=target.n,
        epsilon_final=np.exp(log_eps),
        diagnostics=per,
    )


def with_beta(config: SamplerConfig, beta: float) -> SamplerConfig:
    return replace(config, beta=beta)
