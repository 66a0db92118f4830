#!/usr/bin/env python3
"""
Finite-difference gradient checks

Every check projects an op's output onto fixed random weights to get a scalar,
runs backward once, and compares each input's gradient with central
differences. End-to-end checks run the full bound of miniature models.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List

import numpy as np

import tensor_core as tc
from cstvae import CstVae
from errors import ConfigError
from spatial_transformer import AffineTransform, bilinear_sample, invert, make_grid, stn
from stvae import StVae, StvaeConfig
from tensor_core import Tensor
from vae_core import (GaussianLatent, LikelihoodModel, kl_to_standard_normal, log_likelihood,
                      reparam_sample, sampled_kl)

logger = logging.getLogger(__name__)

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3
STEP = 1e-5
ERROR_FLOOR = 1e-4

# miniature models
MINI_SIZE = 6
MINI_CONTENT_HIDDEN = 8
MINI_POSE_HIDDEN = 4
MINI_LATENT = 2
# off-identity pose keeps bilinear sample points away from pixel boundaries
MINI_POSE_BIAS = np.array([0.9, 0.02, 0.03, -0.01, 0.9, -0.02])


@dataclass
class GradcheckResult:
    module: str
    check: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error) and self.max_rel_error <= self.tolerance)


def numerical_gradient(f: Callable[[], float], array: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of f() with respect to `array`, perturbed in place"""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + h
        plus = f()
        array[idx] = original - h
        minus = f()
        array[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / scale))


def check(module: str, name: str, loss_fn: Callable[[], Tensor], inputs: Dict[str, Tensor],
          tolerance: float = OP_TOLERANCE) -> List[GradcheckResult]:
    """One result per input tensor"""
    for t in inputs.values():
        t.zero_grad()
    tc.backward(loss_fn())
    results = []
    for label, t in inputs.items():
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_gradient(lambda: loss_fn().item(), t.data)
        err = relative_error(analytic, numeric)
        results.append(GradcheckResult(module, f"{name}[{label}]", err, tolerance))
    return results


def _leaf(array) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


def _projection(shape, rng: np.random.Generator) -> Tensor:
    return Tensor._wrap(rng.standard_normal(shape))


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.sign(x) * (np.abs(x) + margin)


# ---------------------------------------------------------------- suites

def tensor_core_suite(rng: np.random.Generator) -> List[GradcheckResult]:
    results = []

    def binary(name, fn, a, b):
        a, b = _leaf(a), _leaf(b)
        w = _projection(fn(a, b).shape, rng)
        results.extend(check("tensor_core", name, lambda: tc.sum(fn(a, b) * w), {"a": a, "b": b}))

    def unary(name, fn, a):
        a = _leaf(a)
        w = _projection(fn(a).shape, rng)
        results.extend(check("tensor_core", name, lambda: tc.sum(fn(a) * w), {"x": a}))

    shape = (3, 4)
    binary("add", tc.add, rng.standard_normal(shape), rng.standard_normal(shape))
    binary("sub", tc.sub, rng.standard_normal(shape), rng.standard_normal(shape))
    binary("mul", tc.mul, rng.standard_normal(shape), rng.standard_normal(shape))
    binary("div", tc.div, rng.standard_normal(shape), _away_from_zero(rng, shape, 0.5))
    binary("mul_scalar", tc.mul, rng.standard_normal(()), rng.standard_normal(shape))
    binary("matmul", tc.matmul, rng.standard_normal((3, 5)), rng.standard_normal((5, 2)))
    unary("neg", tc.neg, rng.standard_normal(shape))
    unary("relu", tc.relu, _away_from_zero(rng, shape))
    unary("tanh", tc.tanh, rng.standard_normal(shape))
    unary("sigmoid", tc.sigmoid, rng.standard_normal(shape))
    unary("log", tc.log, rng.uniform(0.5, 2.0, shape))
    unary("exp", tc.exp, rng.standard_normal(shape))
    unary("square", tc.square, rng.standard_normal(shape))
    unary("clamp", lambda t: tc.clamp(t, -0.5, 0.5), rng.uniform(-0.4, 0.4, shape) +
          np.where(rng.uniform(size=shape) < 0.3, 1.5, 0.0))
    unary("sum_axis", lambda t: tc.sum(t, axes=1), rng.standard_normal(shape))
    unary("mean", lambda t: tc.mean(t, axes=0), rng.standard_normal(shape))
    unary("logsumexp", lambda t: tc.logsumexp(t, axis=1), rng.standard_normal(shape))
    unary("reshape", lambda t: tc.reshape(t, (2, 6)), rng.standard_normal(shape))
    unary("transpose", lambda t: tc.transpose(t, (1, 0)), rng.standard_normal(shape))
    unary("tile", lambda t: tc.tile(t, (2, 1)), rng.standard_normal((1, 4)))
    unary("index", lambda t: t[:, 1:3], rng.standard_normal(shape))
    binary("concat", lambda a, b: tc.concat([a, b], axis=1),
           rng.standard_normal((3, 2)), rng.standard_normal((3, 3)))
    return results


def _perturbed_theta(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.tile(MINI_POSE_BIAS, (n, 1)) + 0.05 * rng.standard_normal((n, 6))


def spatial_transformer_suite(rng: np.random.Generator) -> List[GradcheckResult]:
    results = []
    n, size = 2, MINI_SIZE

    src = _leaf(rng.uniform(size=(n, size, size)))
    grid = _leaf(rng.uniform(-1.1, 1.1, size=(n, size, size, 2)))
    w = _projection((n, size, size), rng)
    results.extend(check("spatial_transformer", "bilinear_sample",
                         lambda: tc.sum(bilinear_sample(src, grid) * w), {"src": src, "grid": grid}))

    theta = _leaf(_perturbed_theta(rng, n))
    wg = _projection((n, 4, 5, 2), rng)
    results.extend(check("spatial_transformer", "make_grid",
                         lambda: tc.sum(make_grid(AffineTransform(theta), 4, 5) * wg), {"theta": theta}))

    wi = _projection((n, 6), rng)
    results.extend(check("spatial_transformer", "invert",
                         lambda: tc.sum(invert(AffineTransform(theta)).theta * wi), {"theta": theta}))

    results.extend(check("spatial_transformer", "stn",
                         lambda: tc.sum(stn(src, AffineTransform(theta)) * w), {"src": src, "theta": theta}))
    results.extend(check("spatial_transformer", "stn_inverse",
                         lambda: tc.sum(stn(src, invert(AffineTransform(theta))) * w),
                         {"src": src, "theta": theta}))
    return results


def vae_core_suite(rng: np.random.Generator) -> List[GradcheckResult]:
    results = []
    n, d = 3, 4
    mu = _leaf(rng.standard_normal((n, d)))
    logvar = _leaf(rng.uniform(-1.0, 1.0, (n, d)))
    noise = rng.standard_normal((n, d))
    w = _projection((n, d), rng)

    results.extend(check("vae_core", "kl_analytic",
                         lambda: kl_to_standard_normal(GaussianLatent(mu, logvar)),
                         {"mu": mu, "logvar": logvar}))
    results.extend(check("vae_core", "reparam_sample",
                         lambda: tc.sum(reparam_sample(GaussianLatent(mu, logvar), noise) * w),
                         {"mu": mu, "logvar": logvar}))

    def sampled():
        q = GaussianLatent(mu, logvar)
        return sampled_kl(q, reparam_sample(q, noise), noise)
    results.extend(check("vae_core", "kl_sampled", sampled, {"mu": mu, "logvar": logvar}))

    raw = _leaf(rng.standard_normal((n, 2 * d)))
    results.extend(check("vae_core", "from_encoder",
                         lambda: kl_to_standard_normal(GaussianLatent.from_encoder(raw)), {"raw": raw}))

    x = (rng.uniform(size=(n, 5, 5)) < 0.5).astype(np.float64)
    x_hat = _leaf(rng.uniform(0.1, 0.9, (n, 5, 5)))
    results.extend(check("vae_core", "bernoulli_loglik",
                         lambda: log_likelihood(x, x_hat, LikelihoodModel("bernoulli")), {"x_hat": x_hat}))
    logits = _leaf(rng.standard_normal((n, 5, 5)))
    results.extend(check("vae_core", "bernoulli_logit_loglik",
                         lambda: log_likelihood(x, logits, LikelihoodModel("bernoulli", logit_link=True)),
                         {"logits": logits}))
    results.extend(check("vae_core", "gaussian_loglik",
                         lambda: log_likelihood(x, x_hat, LikelihoodModel("gaussian", 0.1)), {"x_hat": x_hat}))
    return results


def mini_config(pose: str = "learned") -> StvaeConfig:
    return StvaeConfig(image_h=MINI_SIZE, image_w=MINI_SIZE, content_dim=MINI_LATENT,
                       pose_dim=MINI_LATENT, content_hidden=MINI_CONTENT_HIDDEN,
                       pose_hidden=MINI_POSE_HIDDEN, pose=pose)


def _offset_pose(model: StVae, rng: np.random.Generator):
    dec = model.params.pose_decoder
    if dec is None:
        return
    dec.biases[-1].data[...] = MINI_POSE_BIAS
    dec.weights[-1].data[...] = 0.05 * rng.standard_normal(dec.weights[-1].shape)


def _model_check(module: str, model, rng: np.random.Generator, n: int = 2) -> List[GradcheckResult]:
    x = (rng.uniform(size=(n, MINI_SIZE, MINI_SIZE)) < 0.4).astype(np.float64)
    noise = model.draw_noise(rng, n)
    params = model.parameters()

    def loss():
        return -model.elbo_step(x, noise)[0].elbo

    return check(module, "neg_elbo", loss, params, MODEL_TOLERANCE)


def stvae_suite(rng: np.random.Generator) -> List[GradcheckResult]:
    model = StVae.create(mini_config(), rng)
    _offset_pose(model, rng)
    return _model_check("stvae", model, rng)


def cstvae_suite(rng: np.random.Generator) -> List[GradcheckResult]:
    model = CstVae(mini_config(), n_layers=2, rng=rng)
    for layer in model.layers:
        _offset_pose(layer, rng)
    return _model_check("cstvae", model, rng)


SUITES: Dict[str, Callable[[np.random.Generator], List[GradcheckResult]]] = {
    "tensor_core": tensor_core_suite,
    "spatial_transformer": spatial_transformer_suite,
    "vae_core": vae_core_suite,
    "stvae": stvae_suite,
    "cstvae": cstvae_suite,
}


def run_suite(name: str = "all", seed: int = 0) -> List[GradcheckResult]:
    if name != "all" and name not in SUITES:
        raise ConfigError(f"unknown gradcheck module '{name}', expected one of {['all', *SUITES]}")
    names = list(SUITES) if name == "all" else [name]
    results = []
    for suite in names:
        suite_results = SUITES[suite](np.random.default_rng([seed, list(SUITES).index(suite)]))
        failed = [r for r in suite_results if not r.passed]
        worst = max((r.max_rel_error for r in suite_results), default=0.0)
        logger.info(f"gradcheck {suite}: {len(suite_results) - len(failed)}/{len(suite_results)} passed, "
                    f"worst relative error {worst:.2e}")
        for r in failed:
            logger.error(f"gradcheck {r.module}.{r.check}: relative error {r.max_rel_error:.2e} "
                         f"> {r.tolerance:.0e}")
        results.extend(suite_results)
    return results
