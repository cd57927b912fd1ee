import warnings

import numpy as np
import pytest

from pcbm_rlct.model import GroundTruth
from pcbm_rlct.rlct import PcbmShape, RrrShape, rlct_rrr
from pcbm_rlct.volume import (
    CurvatureWarning,
    WidenThresholdsError,
    default_thresholds,
    make_error_fn,
    rrr_truth,
    volume_scaling_lambda,
)


def quiet(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CurvatureWarning)
        return volume_scaling_lambda(*args, **kwargs)


def test_default_thresholds_span():
    t = default_thresholds()
    assert t[0] == pytest.approx(1e-5) and t[-1] == pytest.approx(1e-11)
    assert np.all(np.diff(t) < 0)


def test_regular_quadratic():
    rep = quiet(lambda w: w[:, 0] ** 2, dim=1, seed=1)
    assert abs(rep.lambda_vol - 0.5) < 0.05
    assert rep.fit_r2 > 0.99


def test_regular_quadratic_uniform_method():
    t = np.logspace(-2, -6, 9)
    rep = quiet(lambda w: w[:, 0] ** 2, dim=1, method="uniform", n_samples=400_000, thresholds=t, seed=2)
    assert abs(rep.lambda_vol - 0.5) < 0.05


def test_product_squared():
    rep = quiet(lambda w: (w[:, 0] * w[:, 1]) ** 2, dim=2, seed=3)
    assert abs(rep.lambda_vol - 0.5) < 0.1


def test_methods_agree_on_shallow_grid():
    fn = lambda w: np.sum(w * w, axis=1)  # noqa: E731
    t = np.logspace(0, -4, 9)
    a = quiet(fn, dim=2, method="uniform", n_samples=2_000_000, thresholds=t, seed=4)
    b = quiet(fn, dim=2, method="splitting", n_samples=4000, thresholds=t, seed=5)
    assert a.lambda_vol == pytest.approx(1.0, abs=0.03)
    assert b.lambda_vol == pytest.approx(1.0, abs=0.05)
    # V(t) = pi * t for the unit disc scaling
    np.testing.assert_allclose(a.log_volume, np.log(np.pi * t), atol=0.1)
    np.testing.assert_allclose(b.log_volume, np.log(np.pi * t), atol=0.3)


@pytest.mark.parametrize("dims", [(1, 1, 1, 0), (1, 1, 1, 1), (1, 1, 2, 0), (1, 2, 1, 1)])
def test_rrr_matches_closed_form(dims):
    shape = RrrShape(*dims)
    rep = quiet("rrr", shape=shape, seed=6)
    assert abs(rep.lambda_vol - float(rlct_rrr(shape))) < 0.15


def test_rrr_truth_rank():
    for dims in [(2, 2, 2, 1), (3, 2, 2, 2), (1, 1, 1, 0)]:
        s = RrrShape(*dims)
        assert np.linalg.matrix_rank(rrr_truth(s)) == s.r


def test_K_below_K_bar_on_cancelling_instance():
    shape = PcbmShape(1, 1, 1, 1, 0)
    truth = GroundTruth(np.array([[0.0, 0.6]]), np.array([[0.0], [0.5]]), shape)
    k = quiet("K", shape=shape, truth=truth, seed=7)
    kbar = quiet("K_bar", shape=shape, truth=truth, seed=7)
    assert k.lambda_vol <= kbar.lambda_vol + 0.1


def test_narrow_thresholds_rejected():
    with pytest.raises(WidenThresholdsError):
        volume_scaling_lambda(lambda w: w[:, 0] ** 2, dim=1, thresholds=np.logspace(-2, -4, 5))


def test_too_few_uniform_hits():
    with pytest.raises(WidenThresholdsError):
        volume_scaling_lambda(
            lambda w: np.sum(w * w, axis=1), dim=4, method="uniform", n_samples=1000,
            thresholds=np.logspace(-2, -8, 7),
        )


def test_parameter_limit():
    with pytest.raises(ValueError):
        volume_scaling_lambda(lambda w: w[:, 0] ** 2, dim=9)


def test_error_fn_validation():
    with pytest.raises(TypeError):
        make_error_fn("rrr", shape=PcbmShape(1, 1, 1, 1))
    with pytest.raises(ValueError):
        make_error_fn("nope")


def test_report_json():
    rep = quiet(lambda w: w[:, 0] ** 2, dim=1, seed=1)
    d = rep.to_json()
    assert d["lambda_vol"] == rep.lambda_vol and len(d["log_volume"]) == len(d["thresholds"])
