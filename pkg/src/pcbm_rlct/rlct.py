"""Closed-form real log canonical thresholds for linear (partial) concept bottleneck models.

All values are exact :class:`fractions.Fraction` instances.  Every RLCT
handled here is a multiple of 1/8, so results are checked against that
invariant before being returned.

Argument order is always ``(n_in, h, m_out, r)``.  The reduced-rank formula is
symmetric under ``n_in <-> m_out``, so callers that think of the output
dimension first get the same value.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from fractions import Fraction

Rational = Fraction

__all__ = [
    "Rational",
    "RrrShape",
    "PcbmShape",
    "CategoricalShape",
    "ShapeError",
    "rlct_rrr",
    "rrr_case",
    "rlct_cbm",
    "rlct_pcbm_upper",
    "rlct_pcbm_upper_categorical",
    "gen_error_gap_lower",
    "free_energy_coefficients",
    "FreeEnergyTerm",
]


class ShapeError(ValueError):
    """Raised when network dimensions or a true rank are inconsistent."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeError(msg)


def _check_int(name: str, value, minimum: int) -> None:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ShapeError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ShapeError(f"{name} must be >= {minimum}, got {value}")


@dataclass(frozen=True)
class RrrShape:
    """Reduced rank regression ``y = U V x`` with ``U: M x H`` and ``V: H x N``."""

    n_in: int
    h: int
    m_out: int
    r: int = 0

    def __post_init__(self):
        _check_int("n_in", self.n_in, 1)
        _check_int("h", self.h, 1)
        _check_int("m_out", self.m_out, 1)
        _check_int("r", self.r, 0)
        if self.r > min(self.n_in, self.h, self.m_out):
            raise ShapeError(
                f"rank r={self.r} exceeds min(n_in, h, m_out)={min(self.n_in, self.h, self.m_out)}"
            )

    @property
    def n_params(self) -> int:
        return self.h * (self.n_in + self.m_out)


@dataclass(frozen=True)
class PcbmShape:
    """Partial CBM with ``h1`` tacit units and ``h2`` concept-supervised units.

    ``r_prime`` is the rank of the tacit block product ``A1^0 B1^0``.
    ``h1 = 0`` is an ordinary CBM.
    """

    n_in: int
    h1: int
    h2: int
    m_out: int
    r_prime: int = 0

    def __post_init__(self):
        _check_int("n_in", self.n_in, 1)
        _check_int("h1", self.h1, 0)
        _check_int("h2", self.h2, 1)
        _check_int("m_out", self.m_out, 1)
        _check_int("r_prime", self.r_prime, 0)
        if self.r_prime > min(self.n_in, self.h1, self.m_out):
            raise ShapeError(
                f"rank r_prime={self.r_prime} exceeds min(n_in, h1, m_out)="
                f"{min(self.n_in, self.h1, self.m_out)}"
            )

    @property
    def h(self) -> int:
        return self.h1 + self.h2

    @property
    def n_params(self) -> int:
        return self.h * (self.n_in + self.m_out)

    @property
    def shape_id(self) -> str:
        return (
            f"N{self.n_in}_H1{self.h1}_H2{self.h2}_M{self.m_out}_r{self.r_prime}"
        )


@dataclass(frozen=True)
class CategoricalShape:
    """PCBM whose outputs and concepts are split into real and categorical parts."""

    n_in: int
    h1: int
    h2_real: int
    h2_cat: int
    m_real: int
    m_cat: int
    r_prime: int = 0

    def __post_init__(self):
        _check_int("n_in", self.n_in, 1)
        for name in ("h1", "h2_real", "h2_cat", "m_real", "m_cat", "r_prime"):
            _check_int(name, getattr(self, name), 0)
        _require(self.h2_real + self.h2_cat >= 1, "h2_real + h2_cat must be >= 1")
        _require(self.m_eff >= 1, f"effective output dimension must be >= 1, got {self.m_eff}")
        _require(
            self.r_prime <= min(self.n_in, self.h1, self.m_eff),
            f"rank r_prime={self.r_prime} exceeds min(n_in, h1, m_eff)="
            f"{min(self.n_in, self.h1, self.m_eff)}",
        )

    @property
    def m_eff(self) -> int:
        """Free output dimensions: a categorical output with ``k`` classes has ``k - 1``."""
        if self.m_cat == 0:
            return self.m_real
        return self.m_real + self.m_cat - 1


def _checked(value: Fraction) -> Fraction:
    assert 8 % value.denominator == 0, value
    return value


def rrr_case(shape: RrrShape) -> str:
    """Return which branch of the reduced-rank formula applies.

    One of ``"1a"``, ``"1b"``, ``"2"``, ``"3"``, ``"4"``.  The conditions of
    the four branches partition the valid shapes; ties belong to branch 1.
    """
    n, h, m, r = shape.n_in, shape.h, shape.m_out, shape.r
    if m + r <= n + h and n + r <= m + h and h + r <= n + m:
        return "1a" if (n + m + h + r) % 2 == 0 else "1b"
    if n + h < m + r:
        return "2"
    if m + h < n + r:
        return "3"
    return "4"


def rlct_rrr(shape: RrrShape) -> Fraction:
    """Exact RLCT of the three-layered linear network (reduced rank regression).

    In the saturated branch (``n_in + m_out < h + r``) the hidden layer is wider
    than needed and the RLCT is ``n_in * m_out / 2``, half the dimension of the
    space of ``M x N`` matrices.  This is also the value the first branch takes
    on its boundary ``h + r = n_in + m_out``.
    """
    n, h, m, r = shape.n_in, shape.h, shape.m_out, shape.r
    case = rrr_case(shape)
    if case in ("1a", "1b"):
        s = h + r
        val = Fraction(2 * s * (n + m) - (n - m) ** 2 - s * s, 8)
        if case == "1b":
            val += Fraction(1, 8)
    elif case == "2":
        val = Fraction(h * n + r * (m - h), 2)
    elif case == "3":
        val = Fraction(h * m + r * (n - h), 2)
    else:
        val = Fraction(n * m, 2)
    return _checked(val)


def rlct_cbm(n_in: int, h: int, m_out: int) -> Fraction:
    """Exact RLCT ``H (M + N) / 2`` of the fully supervised linear CBM."""
    _check_int("n_in", n_in, 1)
    _check_int("h", h, 1)
    _check_int("m_out", m_out, 1)
    return _checked(Fraction(h * (m_out + n_in), 2))


@functools.lru_cache(maxsize=None)
def _tacit_rlct(n_in: int, h1: int, m_out: int, r: int) -> Fraction:
    if h1 == 0:
        return Fraction(0)
    return rlct_rrr(RrrShape(n_in, h1, m_out, r))


def rlct_pcbm_upper(shape: PcbmShape) -> Fraction:
    """Upper bound on the PCBM RLCT: tacit reduced-rank term plus ``H2 (M + N) / 2``."""
    tacit = _tacit_rlct(shape.n_in, shape.h1, shape.m_out, shape.r_prime)
    explicit = Fraction(shape.h2 * (shape.m_out + shape.n_in), 2)
    return _checked(tacit + explicit)


def rlct_pcbm_upper_categorical(shape: CategoricalShape) -> Fraction:
    """PCBM bound when some outputs and/or concepts are categorical.

    A categorical output with ``k`` classes contributes ``k - 1`` free
    dimensions, so the effective output dimension is ``m_real + m_cat - 1``
    (just ``m_real`` when there is no categorical output).
    """
    m_eff = shape.m_eff
    tacit = _tacit_rlct(shape.n_in, shape.h1, m_eff, shape.r_prime)
    explicit = Fraction((shape.h2_real + shape.h2_cat) * (m_eff + shape.n_in), 2)
    return _checked(tacit + explicit)


def gen_error_gap_lower(shape: PcbmShape) -> Fraction:
    """Coefficient of ``1/n`` in the guaranteed gap ``G_CBM - G_PCBM``."""
    naive = Fraction(shape.h1 * (shape.m_out + shape.n_in), 2)
    gap = naive - _tacit_rlct(shape.n_in, shape.h1, shape.m_out, shape.r_prime)
    assert gap >= 0
    return _checked(gap)


@dataclass(frozen=True)
class FreeEnergyTerm:
    log_n_term: float
    note: str


def free_energy_coefficients(lam, n: int) -> FreeEnergyTerm:
    """Deterministic ``lambda * log n`` penalty in the free-energy expansion.

    The ``n S_n`` part depends on data and is left to the caller; the
    ``O_p(log log n)`` remainder is not modelled.
    """
    _check_int("n", n, 2)
    lam = Fraction(lam)
    _require(lam >= 0, f"lambda must be non-negative, got {lam}")
    return FreeEnergyTerm(
        log_n_term=float(lam) * math.log(n),
        note="F_n - n*S_n = log_n_term + O_p(log log n)",
    )
