#!/usr/bin/env python3
"""
Gaussian latent machinery and the variational objective

All functions work on minibatches: latents are [n, d], images are [n, ...],
and every scalar returned is a SUM over the batch. Divide by n for
per-example figures.
"""

import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

import tensor_core as tc
from errors import ConfigError, ContractError, DimensionError, DomainError
from tensor_core import Tensor

LOGVAR_BOUND = 10.0
BERNOULLI_EPS = 1e-6
DEFAULT_GAUSSIAN_VARIANCE = 0.1


@dataclass
class GaussianLatent:
    """Diagonal Gaussian q(z) = N(mu, exp(logvar))"""

    mu: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mu.shape != self.logvar.shape:
            raise DimensionError(f"mu {self.mu.shape} and logvar {self.logvar.shape} differ")
        if not np.all(np.isfinite(self.logvar.data)):
            raise DomainError("logvar contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]

    @classmethod
    def from_encoder(cls, raw: Tensor) -> "GaussianLatent":
        """Split an encoder output [n, 2d] into (mu, logvar), logvar clamped to [-10, 10]"""
        if raw.ndim != 2 or raw.shape[1] % 2:
            raise DimensionError(f"encoder output must be [n, 2d], got {raw.shape}")
        d = raw.shape[1] // 2
        return cls(raw[:, :d], tc.clamp(raw[:, d:], -LOGVAR_BOUND, LOGVAR_BOUND))

    @classmethod
    def standard(cls, n: int, d: int) -> "GaussianLatent":
        return cls(Tensor(np.zeros((n, d))), Tensor(np.zeros((n, d))))


@dataclass(frozen=True)
class LikelihoodModel:
    kind: str = "bernoulli"
    gaussian_variance: float = DEFAULT_GAUSSIAN_VARIANCE
    # literal Ber(sigmoid(x_N)) instead of the clamped composite probability
    logit_link: bool = False

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gaussian"):
            raise ConfigError(f"unknown likelihood '{self.kind}'")
        if not self.gaussian_variance > 0:
            raise ConfigError("gaussian_variance must be positive")


def reparam_sample(q: GaussianLatent, noise) -> Tensor:
    """z = mu + exp(0.5 * logvar) * noise; noise is a constant"""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    if noise.shape != q.mu.shape:
        raise DimensionError(f"noise {noise.shape} does not match latent {q.mu.shape}")
    return q.mu + tc.exp(0.5 * q.logvar) * Tensor._wrap(noise)


def kl_to_standard_normal(q: GaussianLatent) -> Tensor:
    """Analytic KL(q || N(0, I)) summed over dims and batch"""
    terms = tc.square(q.mu) + tc.exp(q.logvar) - 1.0 - q.logvar
    return 0.5 * tc.sum(terms)


def sampled_kl(q: GaussianLatent, z: Tensor, noise) -> Tensor:
    """Single-sample log q(z) - log p(z), the literal Monte-Carlo form of the bound"""
    noise = np.asarray(noise.data if isinstance(noise, Tensor) else noise, dtype=np.float64)
    log_q = tc.sum(-0.5 * q.logvar) - 0.5 * float(np.sum(noise * noise))
    log_p = -0.5 * tc.sum(tc.square(z))
    return log_q - log_p


def kl_term(q: GaussianLatent, z: Tensor, noise, mode: str = "analytic") -> Tensor:
    if mode == "analytic":
        return kl_to_standard_normal(q)
    if mode == "sampled":
        return sampled_kl(q, z, noise)
    raise ConfigError(f"unknown kl mode '{mode}'")


def log_likelihood(x, x_hat: Tensor, model: LikelihoodModel) -> Tensor:
    """log p(x | x_hat) summed over pixels and batch"""
    x_arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if x_arr.shape != x_hat.shape:
        raise DimensionError(f"image {x_arr.shape} and reconstruction {x_hat.shape} differ")
    x_t = Tensor._wrap(x_arr)

    if model.kind == "gaussian":
        var = model.gaussian_variance
        const = -0.5 * math.log(2.0 * math.pi * var) * x_arr.size
        return const - tc.sum(tc.square(x_t - x_hat)) / (2.0 * var)

    if not np.all((x_arr == 0.0) | (x_arr == 1.0)):
        raise ContractError("bernoulli likelihood needs a binary image")
    if model.logit_link:
        probs = tc.sigmoid(x_hat)
    else:
        if np.any(x_hat.data < -1e-9) or np.any(x_hat.data > 1.0 + 1e-9):
            raise ContractError("bernoulli reconstruction must lie in [0, 1]")
        probs = x_hat
    p = tc.clamp(probs, BERNOULLI_EPS, 1.0 - BERNOULLI_EPS)
    return tc.sum(x_t * tc.log(p) + (1.0 - x_t) * tc.log(1.0 - p))


def elbo(loglik: Tensor, kls: Sequence[Tensor]) -> Tensor:
    """loglik - sum(kls); training maximizes this"""
    total = loglik
    for kl in kls:
        total = total - kl
    return total


@dataclass
class ElboTerms:
    """Batch-summed pieces of one bound evaluation"""

    elbo: Tensor
    loglik: Tensor
    kls: List[Tensor]
    n: int

    @property
    def kl_total(self) -> float:
        return float(np.sum([kl.item() for kl in self.kls])) if self.kls else 0.0

    def per_example(self) -> dict:
        return {
            "elbo_per_example": self.elbo.item() / self.n,
            "kl_total": self.kl_total / self.n,
            "loglik": self.loglik.item() / self.n,
        }


def gaussian_noise(rng: np.random.Generator, shape, zero: bool = False) -> np.ndarray:
    return np.zeros(shape) if zero else rng.standard_normal(shape)

