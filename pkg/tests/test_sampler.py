import json

import numpy as np
import pytest
from scipy import stats

from pcbm_rlct.model import Dataset, GroundTruth, Weights, make_ground_truth, neg_log_likelihood, sample_dataset
from pcbm_rlct.rlct import PcbmShape
from pcbm_rlct.sampler import (
    PcbmTarget,
    PriorSpec,
    SamplerConfig,
    SamplerDivergenceError,
    grad_log_posterior,
    log_posterior_unnorm,
    run_chain,
)

TINY = PcbmShape(1, 0, 1, 1, 0)
MAIN = PcbmShape(2, 1, 1, 2, 0)


@pytest.fixture(scope="module")
def tiny_problem():
    truth = make_ground_truth(TINY, 1.0, seed=6)
    return truth, sample_dataset(truth, 200, seed=1)


def rand_w(shape, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    return Weights(rng.normal(0, scale, (shape.m_out, shape.h)), rng.normal(0, scale, (shape.h, shape.n_in)), shape)


def test_posterior_difference_is_likelihood_difference():
    truth = make_ground_truth(MAIN, seed=0)
    data = sample_dataset(truth, 100, seed=2)
    prior = PriorSpec("uniform_box", half_width=20.0)
    w1, w2 = rand_w(MAIN, 1), rand_w(MAIN, 2)
    diff = log_posterior_unnorm(w1, data, prior, 1.0) - log_posterior_unnorm(w2, data, prior, 1.0)
    expected = -(neg_log_likelihood(w1, data) - neg_log_likelihood(w2, data))
    assert diff == pytest.approx(expected, abs=1e-10 * max(1.0, abs(expected)))


def test_beta_zero_is_prior():
    truth = make_ground_truth(MAIN, seed=0)
    data = sample_dataset(truth, 50, seed=2)
    prior = PriorSpec()
    w = rand_w(MAIN, 3)
    assert log_posterior_unnorm(w, data, prior, 0.0) == pytest.approx(float(prior.log_density(w.flat())))


def test_linear_in_beta():
    truth = make_ground_truth(MAIN, seed=0)
    data = sample_dataset(truth, 50, seed=2)
    prior = PriorSpec()
    w = rand_w(MAIN, 4)
    d = log_posterior_unnorm(w, data, prior, 2.0) - log_posterior_unnorm(w, data, prior, 1.0)
    assert d == pytest.approx(-neg_log_likelihood(w, data), rel=1e-12)


@pytest.mark.parametrize("shape", [TINY, MAIN, PcbmShape(3, 2, 2, 2, 1)], ids=lambda s: s.shape_id)
def test_gradient_matches_finite_differences(shape):
    truth = make_ground_truth(shape, seed=1)
    data = sample_dataset(truth, 60, seed=3)
    prior = PriorSpec()
    w = rand_w(shape, 5)
    g = grad_log_posterior(w, data, prior, 1.0).flat()
    theta, h = w.flat(), 1e-5
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = h
        up = log_posterior_unnorm(Weights.from_flat(theta + e, shape), data, prior, 1.0)
        dn = log_posterior_unnorm(Weights.from_flat(theta - e, shape), data, prior, 1.0)
        fd[i] = (up - dn) / (2 * h)
    np.testing.assert_allclose(g, fd, rtol=1e-4, atol=1e-4 * np.max(np.abs(fd)))


def test_gradient_vanishes_at_truth_without_noise():
    truth = make_ground_truth(MAIN, seed=1)
    data = sample_dataset(truth, 40, seed=3, noise=False)
    g = PcbmTarget(data, MAIN).grad_neg_log_lik(truth.weights.flat())
    np.testing.assert_allclose(g, 0.0, atol=1e-10)


def test_likelihood_gradient_doubles_with_beta():
    truth = make_ground_truth(MAIN, seed=1)
    data = sample_dataset(truth, 40, seed=3)
    flat = PriorSpec("uniform_box")
    w = rand_w(MAIN, 6)
    g1 = grad_log_posterior(w, data, flat, 1.0).flat()
    g2 = grad_log_posterior(w, data, flat, 2.0).flat()
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12)


def test_target_matches_direct_likelihood():
    truth = make_ground_truth(PcbmShape(3, 2, 2, 2, 1), seed=2)
    data = sample_dataset(truth, 30, seed=4)
    target = PcbmTarget(data, truth.shape)
    thetas = np.random.default_rng(0).standard_normal((5, truth.shape.n_params))
    direct = [neg_log_likelihood(Weights.from_flat(t, truth.shape), data) for t in thetas]
    np.testing.assert_allclose(target.neg_log_lik(thetas), direct, rtol=1e-10)


def test_config_validation():
    with pytest.raises(ValueError):
        SamplerConfig(n_steps=100, burn_in=100)
    with pytest.raises(ValueError):
        SamplerConfig(target_accept=1.0)
    with pytest.raises(ValueError):
        SamplerConfig(beta=0.0)
    with pytest.raises(ValueError):
        SamplerConfig(kernel="hmc")


def test_acceptance_rate_after_adaptation(tiny_problem):
    truth, data = tiny_problem
    draws = run_chain(data, TINY, PriorSpec(), SamplerConfig(n_steps=3000, burn_in=1500, seed=3), truth=truth)
    assert 0.4 <= draws.accept_rate <= 0.75
    assert draws.n_draws == 4 * 1500


def test_rhat_across_seeds(tiny_problem):
    truth, data = tiny_problem
    cfg = SamplerConfig(n_steps=3000, burn_in=1500)
    for seed in (11, 12):
        draws = run_chain(data, TINY, PriorSpec(), SamplerConfig(**{**cfg.to_json(), "seed": seed}), truth=truth)
        assert draws.rhat_max < 1.1
        assert set(draws.diagnostics) >= {"nll", "K"}


def test_seeded_determinism(tiny_problem):
    truth, data = tiny_problem
    cfg = SamplerConfig(n_steps=400, burn_in=200, seed=5)
    a = run_chain(data, TINY, PriorSpec(), cfg)
    b = run_chain(data, TINY, PriorSpec(), cfg)
    assert a.theta.tobytes() == b.theta.tobytes()
    c = run_chain(data, TINY, PriorSpec(), SamplerConfig(n_steps=400, burn_in=200, seed=6))
    assert a.theta.tobytes() != c.theta.tobytes()


def test_chain_independent_of_chain_count(tiny_problem):
    truth, data = tiny_problem
    two = run_chain(data, TINY, PriorSpec(), SamplerConfig(n_chains=2, n_steps=300, burn_in=100, seed=9))
    four = run_chain(data, TINY, PriorSpec(), SamplerConfig(n_chains=4, n_steps=300, burn_in=100, seed=9))
    np.testing.assert_array_equal(two.theta, four.theta[:2])


def test_divergence_guard():
    shape = TINY
    truth = GroundTruth(np.array([[1e6]]), np.array([[1e6]]), shape)
    data = sample_dataset(truth, 50, seed=0, noise=False)
    cfg = SamplerConfig(n_steps=50, burn_in=10, init="prior", kernel="rwm", step_size=1e3, adapt=False)
    with pytest.raises(SamplerDivergenceError):
        run_chain(data, shape, PriorSpec(sigma=1e4), cfg)


def test_draws_persist(tmp_path, tiny_problem):
    truth, data = tiny_problem
    draws = run_chain(data, TINY, PriorSpec(), SamplerConfig(n_chains=2, n_steps=60, burn_in=20, thin=4))
    csv_path, json_path = draws.save(tmp_path / "draws")
    lines = csv_path.read_text().splitlines()
    assert lines[0] == "chain,step,param_index,value"
    assert len(lines) - 1 == draws.theta.size
    rec = json.loads(json_path.read_text())
    assert set(rec) == {"accept_rate", "rhat_max", "ess_min", "beta", "epsilon_final"}
    chain, step, idx, val = lines[-1].split(",")
    assert float(val) == draws.theta[int(chain), int(step), int(idx)]


def test_log_density_ratios_match_likelihood_times_prior(tiny_problem):
    truth, data = tiny_problem
    prior = PriorSpec()
    draws = run_chain(data, TINY, prior, SamplerConfig(n_chains=2, n_steps=200, burn_in=100))
    ws = draws.samples[:10]
    for w1, w2 in zip(ws[:-1], ws[1:]):
        ratio = log_posterior_unnorm(w1, data, prior, 1.0) - log_posterior_unnorm(w2, data, prior, 1.0)
        direct = (
            -neg_log_likelihood(w1, data) + float(prior.log_density(w1.flat()))
            + neg_log_likelihood(w2, data) - float(prior.log_density(w2.flat()))
        )
        assert ratio == pytest.approx(direct, abs=1e-10)


def _product_marginal(draws):
    th = draws.flat_theta
    return th[:, 0] * th[:, 1]


@pytest.mark.slow
def test_marginal_matches_long_reference_chain(tiny_problem):
    truth, data = tiny_problem
    prior = PriorSpec()
    short = run_chain(data, TINY, prior, SamplerConfig(n_chains=4, n_steps=3000, burn_in=1000, seed=21))
    ref = run_chain(data, TINY, prior, SamplerConfig(n_chains=4, n_steps=300_000, burn_in=1000, thin=10, seed=22))
    assert stats.ks_2samp(_product_marginal(short), _product_marginal(ref)).statistic < 0.05
    assert stats.ks_2samp(short.flat_theta[:, 1], ref.flat_theta[:, 1]).statistic < 0.05


CONCENTRATION_GRID = (100, 200, 400, 800)


@pytest.fixture(scope="module")
def concentration_runs():
    """Monotone-decrease count of posterior mean K over nested datasets, 50 replications."""
    truth = make_ground_truth(TINY, 1.0, seed=6)
    cfg = SamplerConfig(n_chains=4, n_steps=2000, burn_in=1000, thin=2)
    monotone = 0
    for rep in range(50):
        full = sample_dataset(truth, CONCENTRATION_GRID[-1], seed=1000 + rep)
        means = []
        for n in CONCENTRATION_GRID:
            sub = Dataset(full.x[:n], full.y[:n], full.c[:n])
            draws = run_chain(sub, TINY, PriorSpec(), cfg, truth=truth)
            means.append(float(PcbmTarget(sub, TINY).functionals(draws.theta, truth)["K"].mean()))
        monotone += all(np.diff(means) < 0)
    return monotone


def _asymptotic_monotone_probability(dim=2, reps=400_000, seed=0):
    # regular limit: n * E_post[K] = |S_n|^2 / n + dim, with S_n a sum of n whitened scores
    rng = np.random.default_rng(seed)
    total = np.zeros((reps, dim))
    seen, vals = 0, []
    for n in CONCENTRATION_GRID:
        total += rng.standard_normal((reps, dim)) * np.sqrt(n - seen)
        seen = n
        vals.append((np.sum(total**2, axis=1) / n + dim) / n)
    return float(np.mean(np.all(np.diff(np.array(vals), axis=0) < 0, axis=0)))


@pytest.mark.slow
def test_posterior_concentrates_as_n_grows(concentration_runs):
    """Posterior mean of K falls along n = 100, 200, 400, 800 in at least 90% of replications."""
    assert concentration_runs >= 45


@pytest.mark.slow
def test_concentration_rate_matches_asymptotic_oracle(concentration_runs):
    p = _asymptotic_monotone_probability()
    assert abs(concentration_runs - 50 * p) <= 3 * np.sqrt(50 * p * (1 - p))
