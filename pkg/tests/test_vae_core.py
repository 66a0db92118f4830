import math

import numpy as np
import pytest

import tensor_core as tc
from errors import ConfigError, ContractError, DimensionError
from tensor_core import Tensor
from vae_core import (LOGVAR_BOUND, ElboTerms, GaussianLatent, LikelihoodModel, elbo, kl_term,
                      kl_to_standard_normal, log_likelihood, reparam_sample, sampled_kl)


def test_kl_examples():
    q = GaussianLatent(Tensor([[1.0]]), Tensor([[0.0]]))
    assert kl_to_standard_normal(q).item() == pytest.approx(0.5)
    q = GaussianLatent(Tensor([[0.0]]), Tensor([[math.log(2.0)]]))
    assert kl_to_standard_normal(q).item() == pytest.approx(0.153426, abs=1e-6)
    assert kl_to_standard_normal(GaussianLatent.standard(4, 3)).item() == 0.0


def test_kl_sums_over_batch():
    q = GaussianLatent(Tensor([[1.0], [1.0], [0.0]]), Tensor(np.zeros((3, 1))))
    assert kl_to_standard_normal(q).item() == pytest.approx(1.0)


def test_reparam_zero_noise_is_mean():
    q = GaussianLatent(Tensor([[0.3, -0.2]]), Tensor([[1.0, -1.0]]))
    z = reparam_sample(q, np.zeros((1, 2)))
    assert np.allclose(z.data, [[0.3, -0.2]])
    z = reparam_sample(q, np.ones((1, 2)))
    assert np.allclose(z.data, [[0.3 + math.exp(0.5), -0.2 + math.exp(-0.5)]])
    with pytest.raises(DimensionError):
        reparam_sample(q, np.zeros((2, 2)))


def test_from_encoder_clamps_logvar():
    raw = Tensor([[0.1, 0.2, 50.0, -50.0]])
    q = GaussianLatent.from_encoder(raw)
    assert np.allclose(q.mu.data, [[0.1, 0.2]])
    assert np.allclose(q.logvar.data, [[LOGVAR_BOUND, -LOGVAR_BOUND]])
    with pytest.raises(DimensionError):
        GaussianLatent.from_encoder(Tensor([[0.1, 0.2, 0.3]]))


def test_sampled_kl_averages_to_analytic(rng):
    mu = rng.standard_normal((1, 3))
    logvar = rng.uniform(-1, 1, (1, 3))
    q = GaussianLatent(Tensor(np.repeat(mu, 20000, axis=0)), Tensor(np.repeat(logvar, 20000, axis=0)))
    noise = rng.standard_normal((20000, 3))
    z = reparam_sample(q, noise)
    estimate = sampled_kl(q, z, noise).item() / 20000
    exact = kl_to_standard_normal(GaussianLatent(Tensor(mu), Tensor(logvar))).item()
    assert estimate == pytest.approx(exact, abs=0.05)
    with pytest.raises(ConfigError):
        kl_term(q, z, noise, mode="exact")


def test_bernoulli_likelihood():
    x = np.array([[1.0, 0.0]])
    assert log_likelihood(x, Tensor([[0.5, 0.5]]), LikelihoodModel()).item() == pytest.approx(2 * math.log(0.5))
    # clamped away from log(0)
    value = log_likelihood(x, Tensor([[0.0, 1.0]]), LikelihoodModel()).item()
    assert value == pytest.approx(2 * math.log(1e-6), rel=1e-6)


def test_bernoulli_preconditions():
    with pytest.raises(ContractError):
        log_likelihood(np.array([[0.5]]), Tensor([[0.5]]), LikelihoodModel())
    with pytest.raises(ContractError):
        log_likelihood(np.array([[1.0]]), Tensor([[1.5]]), LikelihoodModel())
    with pytest.raises(DimensionError):
        log_likelihood(np.array([[1.0, 0.0]]), Tensor([[0.5]]), LikelihoodModel())


def test_logit_link_accepts_real_values():
    x = np.array([[1.0]])
    value = log_likelihood(x, Tensor([[0.0]]), LikelihoodModel(logit_link=True)).item()
    assert value == pytest.approx(math.log(0.5))


def test_gaussian_likelihood():
    model = LikelihoodModel("gaussian", 0.1)
    x = np.array([[0.2, 0.7]])
    exact = log_likelihood(x, Tensor(x), model).item()
    assert exact == pytest.approx(-math.log(2 * math.pi * 0.1))
    off = log_likelihood(x, Tensor(x + 0.1), model).item()
    assert off == pytest.approx(exact - 2 * 0.01 / 0.2)
    with pytest.raises(ConfigError):
        LikelihoodModel("gaussian", 0.0)


def test_elbo_terms():
    loglik = Tensor(-10.0)
    kls = [Tensor(1.5), Tensor(0.5)]
    total = elbo(loglik, kls)
    assert total.item() == pytest.approx(-12.0)
    terms = ElboTerms(total, loglik, kls, 4)
    assert terms.kl_total == pytest.approx(2.0)
    assert terms.per_example() == {"elbo_per_example": -3.0, "kl_total": 0.5, "loglik": -2.5}


def _log_marginal(x, W, b, var):
    cov = W.T @ W + var * np.eye(len(x))
    diff = x - b
    _, logdet = np.linalg.slogdet(cov)
    return -0.5 * (len(x) * math.log(2 * math.pi) + logdet + diff @ np.linalg.solve(cov, diff))


def test_elbo_bounds_log_marginal():
    """Linear-Gaussian toy with a 2-d latent: the bound never exceeds the exact evidence"""
    rng = np.random.default_rng(7)
    samples, var = 4000, 0.5
    model = LikelihoodModel("gaussian", var)
    for _ in range(100):
        W = rng.standard_normal((2, 2))
        b = rng.standard_normal(2)
        x = rng.standard_normal(2) * 2.0
        mu = rng.standard_normal((1, 2))
        logvar = rng.uniform(-2, 1, (1, 2))
        q = GaussianLatent(Tensor(np.repeat(mu, samples, 0)), Tensor(np.repeat(logvar, samples, 0)))
        noise = rng.standard_normal((samples, 2))
        z = reparam_sample(q, noise)
        x_hat = tc.matmul(z, Tensor(W)) + Tensor(np.tile(b, (samples, 1)))
        xs = np.tile(x, (samples, 1))
        bound = elbo(log_likelihood(xs, x_hat, model), [kl_to_standard_normal(q)]).item() / samples

        per_sample = (-math.log(2 * math.pi * var)
                      - np.sum((xs - x_hat.data) ** 2, axis=1) / (2 * var))
        mc_error = per_sample.std() / math.sqrt(samples)
        assert bound <= _log_marginal(x, W, b, var) + 4 * mc_error + 1e-9
