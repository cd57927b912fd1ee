"""Learning coefficients and Bayesian generalization error of linear (partial) concept bottleneck models."""

from .rlct import (
    CategoricalShape,
    PcbmShape,
    Rational,
    RrrShape,
    ShapeError,
    free_energy_coefficients,
    gen_error_gap_lower,
    rlct_cbm,
    rlct_pcbm_upper,
    rlct_pcbm_upper_categorical,
    rlct_rrr,
)

__version__ = "0.1.0"
