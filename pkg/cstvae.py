#!/usr/bin/env python3
"""
Composited multi-layer model

Layers composite front to back with the premultiplied over operator
(x_i = x_{i-1} over L_i, x_0 = 0). Inference peels one layer at a time:
Delta_1 = x, Delta_{i+1} = relu(Delta_i - L_i), each Delta_i inferred by its
own single-layer model.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

import tensor_core as tc
from errors import ConfigError, ContractError, DimensionError
from stvae import RANGE_TOLERANCE, StVae, StvaeConfig, StvaeTrace, check_unit_range
from tensor_core import Tensor
from training import CONTENT_DEFAULTS
from vae_core import ElboTerms, LikelihoodModel, elbo, log_likelihood

logger = logging.getLogger(__name__)

MODEL_KINDS = ("vae", "stvae", "cstvae")


def _check_range(t: Tensor, what: str):
    if t.data.size and (t.data.min() < -RANGE_TOLERANCE or t.data.max() > 1.0 + RANGE_TOLERANCE):
        raise ContractError(f"{what} must lie in [0, 1]")


def over(front, back) -> Tensor:
    """front + (1 - front) * back, grayscale value doubling as premultiplied alpha"""
    front, back = tc.as_tensor(front), tc.as_tensor(back)
    if front.shape != back.shape:
        raise DimensionError(f"over: {front.shape} vs {back.shape}")
    _check_range(front, "over: front")
    _check_range(back, "over: back")
    return front + (1.0 - front) * back


def composite(layers: Sequence) -> Tensor:
    """Left fold of over from x_0 = 0; layers[0] is the front-most"""
    if not layers:
        raise ContractError("composite needs at least one layer")
    layers = [tc.as_tensor(layer) for layer in layers]
    x = Tensor._wrap(np.zeros(layers[0].shape))
    for layer in layers:
        x = over(x, layer)
    return x


def residual(delta, layer) -> Tensor:
    """max(0, delta - layer): what is left to explain after removing a layer"""
    return tc.relu(tc.as_tensor(delta) - tc.as_tensor(layer))


@dataclass
class LayerTrace:
    delta: Tensor
    trace: StvaeTrace
    composite: Tensor


@dataclass
class CstvaeTrace:
    layers: List[LayerTrace]
    reconstruction: Tensor


@dataclass
class Decomposition:
    image: np.ndarray
    reconstruction: np.ndarray
    layers: List[np.ndarray]


class CstVae:
    def __init__(self, config: StvaeConfig, n_layers: int = 2, tie_layers: bool = False,
                 rng: np.random.Generator = None):
        if n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        self.n_layers = n_layers
        self.tie_layers = tie_layers
        if tie_layers:
            shared = StVae.create(config, rng, prefix="shared.")
            self.layers = [shared] * n_layers
        else:
            self.layers = [StVae.create(config, rng, prefix=f"layer{i}.") for i in range(n_layers)]

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for layer in self.layers:
            params.update(layer.parameters())
        return params

    def draw_noise(self, rng: np.random.Generator, n: int, zero: bool = False) -> Dict[str, np.ndarray]:
        noise = {}
        for i, layer in enumerate(self.layers):
            for key, array in layer.draw_noise(rng, n, zero).items():
                noise[f"{i}:{key}"] = array
        return noise

    @staticmethod
    def _layer_noise(noise: Dict[str, np.ndarray], i: int) -> Dict[str, np.ndarray]:
        tag = f"{i}:"
        return {key[len(tag):]: value for key, value in noise.items() if key.startswith(tag)}

    def infer(self, x, noise: Dict[str, np.ndarray]):
        x = tc.as_tensor(x)
        delta = x
        running = Tensor._wrap(np.zeros(x.shape))
        traces, kls = [], []
        for i, layer in enumerate(self.layers):
            trace, layer_kls = layer.infer_layer(delta, self._layer_noise(noise, i))
            running = over(running, trace.layer)
            traces.append(LayerTrace(delta, trace, running))
            kls.extend(layer_kls)
            delta = residual(delta, trace.layer)
            if self.config.check_ranges:
                check_unit_range(delta, running)
        return CstvaeTrace(traces, running), kls

    def elbo_step(self, x, noise: Dict[str, np.ndarray]):
        trace, kls = self.infer(x, noise)
        loglik = log_likelihood(x, trace.reconstruction, self.config.likelihood)
        return ElboTerms(elbo(loglik, kls), loglik, kls, trace.reconstruction.shape[0]), trace

    def content_means(self, images: np.ndarray) -> np.ndarray:
        """[mu_C,1 | mu_C,2 | ...] per image"""
        trace, _ = self.infer(images, self.draw_noise(None, images.shape[0], zero=True))
        return np.concatenate([lt.trace.q_content.mu.data for lt in trace.layers], axis=1)

    def decompose(self, x: np.ndarray) -> Decomposition:
        """Posterior-mean layers and reconstruction"""
        x = np.asarray(x, dtype=np.float64)
        trace, _ = self.infer(x, self.draw_noise(None, x.shape[0], zero=True))
        return Decomposition(x, trace.reconstruction.data.copy(),
                             [lt.trace.layer.data.copy() for lt in trace.layers])

    def sample(self, rng: np.random.Generator, n: int):
        """Independent layers drawn from the prior, composited front to back"""
        layers = [layer.sample(rng, n)[2] for layer in self.layers]
        return layers, composite(layers)


def build_model(kind: str, image_h: int, image_w: int, rng: np.random.Generator,
                content_dim: Optional[int] = None, pose_dim: int = 6,
                content_hidden: Optional[int] = None, pose_hidden: int = 32, hidden_layers: int = 2,
                n_layers: int = 2, tie_layers: bool = False,
                likelihood: str = "bernoulli", gaussian_variance: float = 0.1,
                logit_link: bool = False, kl_mode: str = "analytic", check_ranges: bool = False):
    """vae / stvae -> StVae, cstvae -> CstVae"""
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind '{kind}', expected one of {MODEL_KINDS}")
    default_dim, default_hidden = CONTENT_DEFAULTS[kind]
    content_dim = default_dim if content_dim is None else content_dim
    content_hidden = default_hidden if content_hidden is None else content_hidden
    cfg = StvaeConfig(
        image_h=image_h, image_w=image_w, content_dim=content_dim, pose_dim=pose_dim,
        content_hidden=content_hidden, pose_hidden=pose_hidden, hidden_layers=hidden_layers,
        pose="identity" if kind == "vae" else "learned", kl_mode=kl_mode,
        likelihood=LikelihoodModel(likelihood, gaussian_variance, logit_link),
        check_ranges=check_ranges,
    )
    if kind == "cstvae":
        model = CstVae(cfg, n_layers=n_layers, tie_layers=tie_layers, rng=rng)
    else:
        model = StVae.create(cfg, rng)
    logger.info(f"Built {kind} model: {len(model.parameters())} parameter tensors, "
                f"{sum(p.data.size for p in model.parameters().values())} scalars")
    return model
