"""Three-layered linear PCBM: ground truth, synthetic data and error functions.

The model is

    y | x ~ N(A B x, I_M),        c | x ~ N(B2 x, I_H2),

with ``A = [A1, A2]`` (``M x (H1 + H2)``) and ``B = [B1; B2]``
(``(H1 + H2) x N``).  Inputs are standard normal, so the x-averaged KL
divergence between truth and model is half of
``||AB - A0 B0||^2 + ||B2 - B2_0||^2``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rlct import PcbmShape

LOG_2PI = math.log(2.0 * math.pi)

# singular values below this fraction of the largest count as zero
RANK_RTOL = 1e-8
MAX_RANK_ATTEMPTS = 100


class DegenerateTruthError(RuntimeError):
    """Could not realise a ground truth of the requested rank."""


def numerical_rank(mat: np.ndarray, rtol: float = RANK_RTOL) -> int:
    if mat.size == 0:
        return 0
    s = np.linalg.svd(mat, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def _split(shape: PcbmShape, a: np.ndarray, b: np.ndarray):
    h1 = shape.h1
    return a[..., :, :h1], a[..., :, h1:], b[..., :h1, :], b[..., h1:, :]


@dataclass(frozen=True)
class Weights:
    """Parameter ``w = (A, B)`` of a PCBM.

    ``a`` has shape ``(M, H)`` and ``b`` has shape ``(H, N)``; the last ``H2``
    rows of ``b`` are the concept-supervised block ``B2``.
    """

    a: np.ndarray
    b: np.ndarray
    shape: PcbmShape

    def __post_init__(self):
        s = self.shape
        if self.a.shape != (s.m_out, s.h) or self.b.shape != (s.h, s.n_in):
            raise ValueError(
                f"weights of shape a{self.a.shape}, b{self.b.shape} do not match "
                f"{s.shape_id} (expected a({s.m_out}, {s.h}), b({s.h}, {s.n_in}))"
            )

    @property
    def a1(self):
        return self.a[:, : self.shape.h1]

    @property
    def a2(self):
        return self.a[:, self.shape.h1 :]

    @property
    def b1(self):
        return self.b[: self.shape.h1]

    @property
    def b2(self):
        return self.b[self.shape.h1 :]

    @property
    def product(self) -> np.ndarray:
        return self.a @ self.b

    def flat(self) -> np.ndarray:
        return np.concatenate([self.a.ravel(), self.b.ravel()])

    @classmethod
    def from_flat(cls, theta: np.ndarray, shape: PcbmShape) -> "Weights":
        na = shape.m_out * shape.h
        theta = np.asarray(theta, dtype=float)
        return cls(
            theta[:na].reshape(shape.m_out, shape.h).copy(),
            theta[na:].reshape(shape.h, shape.n_in).copy(),
            shape,
        )


def unflatten_batch(theta: np.ndarray, shape: PcbmShape):
    """Split ``(..., dim)`` parameter vectors into ``(..., M, H)`` and ``(..., H, N)``."""
    na = shape.m_out * shape.h
    lead = theta.shape[:-1]
    a = theta[..., :na].reshape(*lead, shape.m_out, shape.h)
    b = theta[..., na:].reshape(*lead, shape.h, shape.n_in)
    return a, b


@dataclass(frozen=True)
class GroundTruth:
    a0: np.ndarray
    b0: np.ndarray
    shape: PcbmShape
    scale: float = 1.0
    seed: int = 0

    @property
    def weights(self) -> Weights:
        return Weights(self.a0, self.b0, self.shape)

    @property
    def product(self) -> np.ndarray:
        return self.a0 @ self.b0

    @property
    def b2(self) -> np.ndarray:
        return self.b0[self.shape.h1 :]

    @property
    def tacit_rank(self) -> int:
        h1 = self.shape.h1
        return numerical_rank(self.a0[:, :h1] @ self.b0[:h1])

    def to_json(self) -> dict:
        return {
            "shape": _shape_dict(self.shape),
            "scale": self.scale,
            "seed": self.seed,
            "a0": self.a0.tolist(),
            "b0": self.b0.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "GroundTruth":
        return cls(
            np.asarray(d["a0"], dtype=float).reshape(
                d["shape"]["m_out"], d["shape"]["h1"] + d["shape"]["h2"]
            ),
            np.asarray(d["b0"], dtype=float).reshape(
                d["shape"]["h1"] + d["shape"]["h2"], d["shape"]["n_in"]
            ),
            PcbmShape(**d["shape"]),
            d.get("scale", 1.0),
            d.get("seed", 0),
        )


def _shape_dict(shape: PcbmShape) -> dict:
    return {
        "n_in": shape.n_in,
        "h1": shape.h1,
        "h2": shape.h2,
        "m_out": shape.m_out,
        "r_prime": shape.r_prime,
    }


def make_ground_truth(shape: PcbmShape, scale: float = 1.0, seed: int = 0) -> GroundTruth:
    """Draw Gaussian truth matrices whose tacit product has rank exactly ``r_prime``.

    ``B1^0`` is drawn full rank and ``A1^0`` is the product of an
    ``M x r'`` and an ``r' x H1`` Gaussian factor, so ``A1^0 B1^0`` has rank
    ``r'`` unless the draw is numerically degenerate, in which case it is
    redrawn.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    rng = np.random.default_rng(seed)
    n, h1, h2, m, r = shape.n_in, shape.h1, shape.h2, shape.m_out, shape.r_prime
    for _ in range(MAX_RANK_ATTEMPTS):
        b1 = rng.normal(0.0, scale, size=(h1, n))
        if r == 0:
            a1 = np.zeros((m, h1))
        else:
            a1 = rng.normal(0.0, scale, size=(m, r)) @ rng.normal(0.0, 1.0, size=(r, h1))
        a2 = rng.normal(0.0, scale, size=(m, h2))
        b2 = rng.normal(0.0, scale, size=(h2, n))
        if h1 and numerical_rank(b1) != min(h1, n):
            continue
        if h1 and numerical_rank(a1 @ b1) != r:
            continue
        return GroundTruth(np.hstack([a1, a2]), np.vstack([b1, b2]), shape, scale, seed)
    raise DegenerateTruthError(
        f"no truth of tacit rank {r} after {MAX_RANK_ATTEMPTS} draws at scale={scale}"
    )


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    c: np.ndarray
    seed: int = 0
    _stats: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        n = self.x.shape[0]
        if self.y.shape[0] != n or self.c.shape[0] != n:
            raise ValueError("x, y and c must have the same number of rows")
        if not (np.isfinite(self.x).all() and np.isfinite(self.y).all() and np.isfinite(self.c).all()):
            raise ValueError("dataset contains non-finite entries")
        x, y, c = self.x, self.y, self.c
        stats = {
            "xx": x.T @ x,
            "yx": y.T @ x,
            "cx": c.T @ x,
            "yy": float(np.sum(y * y)),
            "cc": float(np.sum(c * c)),
        }
        object.__setattr__(self, "_stats", stats)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def stats(self) -> dict:
        """Sufficient statistics ``X^T X``, ``Y^T X``, ``C^T X``, ``tr Y^T Y``, ``tr C^T C``."""
        return self._stats

    def to_csv(self, path) -> None:
        n_in, m, h2 = self.x.shape[1], self.y.shape[1], self.c.shape[1]
        header = (
            ["row"]
            + [f"x_{i}" for i in range(n_in)]
            + [f"y_{i}" for i in range(m)]
            + [f"c_{i}" for i in range(h2)]
        )
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(self.n):
                w.writerow([i] + [repr(float(v)) for v in np.concatenate([self.x[i], self.y[i], self.c[i]])])

    @classmethod
    def read_csv(cls, path, n_in: int, m_out: int, h2: int, seed: int = 0) -> "Dataset":
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        x = arr[:, 1 : 1 + n_in]
        y = arr[:, 1 + n_in : 1 + n_in + m_out]
        c = arr[:, 1 + n_in + m_out : 1 + n_in + m_out + h2]
        return cls(x, y, c, seed)


def save_dataset(data: Dataset, truth: GroundTruth, stem) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and a ``<stem>.json`` sidecar with the truth."""
    stem = Path(stem)
    csv_path, json_path = stem.with_suffix(".csv"), stem.with_suffix(".json")
    data.to_csv(csv_path)
    side = truth.to_json()
    side["data_seed"] = data.seed
    side["n"] = data.n
    json_path.write_text(json.dumps(side, indent=2))
    return csv_path, json_path


def load_dataset(stem) -> tuple[Dataset, GroundTruth]:
    stem = Path(stem)
    side = json.loads(stem.with_suffix(".json").read_text())
    truth = GroundTruth.from_json(side)
    s = truth.shape
    data = Dataset.read_csv(stem.with_suffix(".csv"), s.n_in, s.m_out, s.h2, side.get("data_seed", 0))
    return data, truth


def sample_inputs(rng: np.random.Generator, n: int, n_in: int) -> np.ndarray:
    return rng.standard_normal((n, n_in))


def sample_dataset(truth: GroundTruth, n: int, seed: int = 0, noise: bool = True) -> Dataset:
    """Draw ``n`` triples ``(x, y, c)`` from the truth; ``noise=False`` gives the noiseless means."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    s = truth.shape
    x = sample_inputs(rng, n, s.n_in)
    ey = rng.standard_normal((n, s.m_out))
    ec = rng.standard_normal((n, s.h2))
    y = x @ truth.product.T
    c = x @ truth.b2.T
    if noise:
        y = y + ey
        c = c + ec
    return Dataset(x, y, c, seed)


def log_normaliser(shape: PcbmShape) -> float:
    """Per-datum Gaussian normalising constant ``(M + H2)/2 * log 2 pi``."""
    return 0.5 * (shape.m_out + shape.h2) * LOG_2PI


def entropy_true(shape: PcbmShape) -> float:
    """Conditional entropy of ``(y, c) | x`` under unit-variance Gaussian noise."""
    return 0.5 * (shape.m_out + shape.h2) * (1.0 + LOG_2PI)


@dataclass(frozen=True)
class LogDensityTerms:
    neg_log_lik: float
    entropy_empirical: float
    entropy_true: float


def neg_log_likelihood(w: Weights, data: Dataset) -> float:
    """``n L_n(w)`` in nats, including the Gaussian normalising constant."""
    s = w.shape
    if data.x.shape[1] != s.n_in or data.y.shape[1] != s.m_out or data.c.shape[1] != s.h2:
        raise ValueError(
            f"dataset columns (x={data.x.shape[1]}, y={data.y.shape[1]}, c={data.c.shape[1]}) "
            f"do not match {s.shape_id}"
        )
    ry = data.y - data.x @ w.product.T
    rc = data.c - data.x @ w.b2.T
    return 0.5 * float(np.sum(ry * ry) + np.sum(rc * rc)) + data.n * log_normaliser(s)


def log_density_terms(w: Weights, truth: GroundTruth, data: Dataset) -> LogDensityTerms:
    nll = neg_log_likelihood(w, data)
    return LogDensityTerms(
        neg_log_lik=nll,
        entropy_empirical=neg_log_likelihood(truth.weights, data) / data.n,
        entropy_true=entropy_true(truth.shape),
    )


def log_density(w: Weights, x, y, c) -> np.ndarray:
    """Row-wise ``log p(y, c | w, x)`` for arrays of observations."""
    x, y, c = np.atleast_2d(x), np.atleast_2d(y), np.atleast_2d(c)
    ry = y - x @ w.product.T
    rc = c - x @ w.b2.T
    return -0.5 * (np.sum(ry * ry, axis=1) + np.sum(rc * rc, axis=1)) - log_normaliser(w.shape)


def averaged_error_K(w: Weights, truth: GroundTruth) -> float:
    """``||AB - A0 B0||^2 + ||B2 - B2_0||^2`` (twice the x-averaged KL divergence)."""
    d = w.product - truth.product
    e = w.b2 - truth.b2
    return float(np.sum(d * d) + np.sum(e * e))


def averaged_error_upper(w: Weights, truth: GroundTruth) -> float:
    """Block-separated error in which tacit and explicit parts are fitted independently.

    ``||A1 B1 - A1^0 B1^0||^2 + ||A2 B2 - A2^0 B2^0||^2 + ||B2 - B2^0||^2``.

    Note this dominates :func:`averaged_error_K` only up to a factor of two:
    ``K <= 2 * K_bar`` always, while ``K <= K_bar`` fails whenever the two block
    residuals are positively aligned.
    """
    a1, a2, b1, b2 = _split(w.shape, w.a, w.b)
    a10, a20, b10, b20 = _split(truth.shape, truth.a0, truth.b0)
    d1 = a1 @ b1 - a10 @ b10
    d2 = a2 @ b2 - a20 @ b20
    e = b2 - b20
    return float(np.sum(d1 * d1) + np.sum(d2 * d2) + np.sum(e * e))


def averaged_error_K_batch(theta: np.ndarray, truth: GroundTruth) -> np.ndarray:
    a, b = unflatten_batch(theta, truth.shape)
    d = a @ b - truth.product
    e = b[..., truth.shape.h1 :, :] - truth.b2
    return np.sum(d * d, axis=(-2, -1)) + np.sum(e * e, axis=(-2, -1))


def averaged_error_upper_batch(theta: np.ndarray, truth: GroundTruth) -> np.ndarray:
    a, b = unflatten_batch(theta, truth.shape)
    a1, a2, b1, b2 = _split(truth.shape, a, b)
    a10, a20, b10, b20 = _split(truth.shape, truth.a0, truth.b0)
    d1 = a1 @ b1 - a10 @ b10
    d2 = a2 @ b2 - a20 @ b20
    e = b2 - b20
    return (
        np.sum(d1 * d1, axis=(-2, -1))
        + np.sum(d2 * d2, axis=(-2, -1))
        + np.sum(e * e, axis=(-2, -1))
    )
