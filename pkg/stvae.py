#!/usr/bin/env python3
"""
Single-layer spatially transformed VAE

Generative side:  C = sigmoid(f_C(z_C)),  T = f_T(z_T),  L = STN(C, T)
Recognition side: q(z_T | L), then undo the pose  C_hat = STN(L, T_hat^-1),
                  then q(z_C | C_hat). f_T is shared by both sides.

With pose="identity" the pose networks are dropped and T is the identity,
which is exactly the vanilla VAE baseline.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

import tensor_core as tc
from errors import ConfigError, ContractError, DimensionError
from spatial_transformer import IDENTITY_PARAMS, AffineTransform, invert, stn
from tensor_core import Tensor
from training import glorot_init
from vae_core import (ElboTerms, GaussianLatent, LikelihoodModel, elbo, gaussian_noise, kl_term,
                      log_likelihood, reparam_sample)

logger = logging.getLogger(__name__)

_ACTIVATIONS = {"relu": tc.relu, "tanh": tc.tanh}
RANGE_TOLERANCE = 1e-9


class MLP:
    """Fully connected network, weights [in, out] and biases [1, out]"""

    def __init__(self, sizes: Sequence[int], hidden_act: str, output_act: str,
                 rng: np.random.Generator, name: str):
        if hidden_act not in _ACTIVATIONS:
            raise ConfigError(f"unknown hidden nonlinearity '{hidden_act}'")
        if output_act not in ("none", "sigmoid"):
            raise ConfigError(f"unknown output nonlinearity '{output_act}'")
        self.sizes = list(sizes)
        self.hidden_act = hidden_act
        self.output_act = output_act
        self.name = name
        self.weights: List[Tensor] = []
        self.biases: List[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            self.weights.append(Tensor(glorot_init(fan_in, fan_out, rng),
                                       requires_grad=True, name=f"{name}.W{i}"))
            self.biases.append(Tensor(np.zeros((1, fan_out)), requires_grad=True, name=f"{name}.b{i}"))

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.sizes[0]:
            raise DimensionError(f"{self.name}: expected [n, {self.sizes[0]}], got {x.shape}")
        n = x.shape[0]
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = tc.matmul(h, W) + tc.tile(b, (n, 1))
            if i < last:
                h = _ACTIVATIONS[self.hidden_act](h)
        if self.output_act == "sigmoid":
            h = tc.sigmoid(h)
        return h

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for W, b in zip(self.weights, self.biases):
            params[W.name] = W
            params[b.name] = b
        return params


@dataclass
class StvaeConfig:
    image_h: int
    image_w: int
    content_dim: int = 50
    pose_dim: int = 6
    content_hidden: int = 256
    pose_hidden: int = 32
    hidden_layers: int = 2
    pose: str = "learned"
    kl_mode: str = "analytic"
    likelihood: LikelihoodModel = field(default_factory=LikelihoodModel)
    check_ranges: bool = False

    def __post_init__(self):
        if self.pose not in ("learned", "identity"):
            raise ConfigError(f"pose must be 'learned' or 'identity', got '{self.pose}'")
        if min(self.content_dim, self.pose_dim, self.content_hidden, self.pose_hidden,
               self.hidden_layers) <= 0:
            raise ConfigError("latent dims and hidden widths must be positive")

    @property
    def pixels(self) -> int:
        return self.image_h * self.image_w


@dataclass
class StvaeParams:
    content_decoder: MLP
    content_encoder: MLP
    pose_decoder: Optional[MLP] = None
    pose_encoder: Optional[MLP] = None

    def networks(self) -> List[MLP]:
        nets = [self.content_decoder, self.pose_decoder, self.pose_encoder, self.content_encoder]
        return [net for net in nets if net is not None]

    def parameters(self) -> Dict[str, Tensor]:
        params = {}
        for net in self.networks():
            params.update(net.parameters())
        return params


def init_stvae_params(cfg: StvaeConfig, rng: np.random.Generator, prefix: str = "") -> StvaeParams:
    """Glorot weights, zero biases, pose decoder emitting the identity transform"""
    d = cfg.pixels
    ch = [cfg.content_hidden] * cfg.hidden_layers
    ph = [cfg.pose_hidden] * cfg.hidden_layers
    params = StvaeParams(
        content_decoder=MLP([cfg.content_dim, *ch, d], "relu", "sigmoid", rng, f"{prefix}content_decoder"),
        content_encoder=MLP([d, *ch, 2 * cfg.content_dim], "relu", "none", rng, f"{prefix}content_encoder"),
    )
    if cfg.pose == "learned":
        params.pose_decoder = MLP([cfg.pose_dim, *ph, 6], "tanh", "none", rng, f"{prefix}pose_decoder")
        params.pose_encoder = MLP([d, *ph, 2 * cfg.pose_dim], "tanh", "none", rng, f"{prefix}pose_encoder")
        params.pose_decoder.weights[-1].data[...] = 0.0
        params.pose_decoder.biases[-1].data[...] = IDENTITY_PARAMS
    return params


@dataclass
class StvaeTrace:
    q_content: GaussianLatent
    z_content: Tensor
    canonical_estimate: Tensor
    q_pose: Optional[GaussianLatent] = None
    z_pose: Optional[Tensor] = None
    transform: Optional[AffineTransform] = None
    canonical: Optional[Tensor] = None
    layer: Optional[Tensor] = None


class StVae:
    def __init__(self, config: StvaeConfig, params: StvaeParams, prefix: str = ""):
        self.config = config
        self.params = params
        self.prefix = prefix

    @classmethod
    def create(cls, config: StvaeConfig, rng: np.random.Generator, prefix: str = "") -> "StVae":
        return cls(config, init_stvae_params(config, rng, prefix), prefix)

    @property
    def learns_pose(self) -> bool:
        return self.config.pose == "learned"

    @property
    def latent_dims(self) -> Dict[str, int]:
        dims = {f"{self.prefix}content": self.config.content_dim}
        if self.learns_pose:
            dims[f"{self.prefix}pose"] = self.config.pose_dim
        return dims

    def parameters(self) -> Dict[str, Tensor]:
        return self.params.parameters()

    def draw_noise(self, rng: np.random.Generator, n: int, zero: bool = False) -> Dict[str, np.ndarray]:
        return {key: gaussian_noise(rng, (n, d), zero)
                for key, d in self.latent_dims.items()}

    # ------------------------------------------------------------ generative

    def pose_transform(self, z_pose: Optional[Tensor], n: int) -> AffineTransform:
        if not self.learns_pose:
            return AffineTransform.identity(n)
        return AffineTransform(self.params.pose_decoder(z_pose))

    def decode(self, z_content: Tensor, z_pose: Optional[Tensor] = None):
        """(C, T, L) for a batch of latent codes"""
        cfg = self.config
        z_content = tc.as_tensor(z_content)
        n = z_content.shape[0]
        if z_content.shape != (n, cfg.content_dim):
            raise DimensionError(f"z_C must be [n, {cfg.content_dim}], got {z_content.shape}")
        if self.learns_pose:
            z_pose = tc.as_tensor(z_pose)
            if z_pose.shape != (n, cfg.pose_dim):
                raise DimensionError(f"z_T must be [n, {cfg.pose_dim}], got {z_pose.shape}")
        canonical = tc.reshape(self.params.content_decoder(z_content), (n, cfg.image_h, cfg.image_w))
        transform = self.pose_transform(z_pose, n)
        layer = stn(canonical, transform, cfg.image_h, cfg.image_w)
        return canonical, transform, layer

    # ----------------------------------------------------------- recognition

    def encode(self, image, noise: Dict[str, np.ndarray]) -> StvaeTrace:
        cfg = self.config
        image = tc.as_tensor(image)
        n = image.shape[0]
        if image.shape[1:] != (cfg.image_h, cfg.image_w):
            raise DimensionError(f"expected [n, {cfg.image_h}, {cfg.image_w}] images, got {image.shape}")
        flat = tc.reshape(image, (n, cfg.pixels))

        q_pose = z_pose = None
        if self.learns_pose:
            q_pose = GaussianLatent.from_encoder(self.params.pose_encoder(flat))
            z_pose = reparam_sample(q_pose, noise[f"{self.prefix}pose"])
            transform = AffineTransform(self.params.pose_decoder(z_pose))
            canonical_estimate = stn(image, invert(transform))
        else:
            transform = AffineTransform.identity(n)
            canonical_estimate = stn(image, transform)

        q_content = GaussianLatent.from_encoder(
            self.params.content_encoder(tc.reshape(canonical_estimate, (n, cfg.pixels))))
        z_content = reparam_sample(q_content, noise[f"{self.prefix}content"])
        return StvaeTrace(q_content, z_content, canonical_estimate, q_pose, z_pose, transform)

    def infer_layer(self, image, noise: Dict[str, np.ndarray]):
        """encode then decode; returns the filled trace and this layer's KL terms"""
        trace = self.encode(image, noise)
        trace.canonical, trace.transform, trace.layer = self.decode(trace.z_content, trace.z_pose)
        mode = self.config.kl_mode
        kls = []
        if trace.q_pose is not None:
            kls.append(kl_term(trace.q_pose, trace.z_pose, noise[f"{self.prefix}pose"], mode))
        kls.append(kl_term(trace.q_content, trace.z_content, noise[f"{self.prefix}content"], mode))
        if self.config.check_ranges:
            check_unit_range(trace.canonical_estimate, trace.canonical, trace.layer)
        return trace, kls

    def elbo_step(self, x, noise: Dict[str, np.ndarray]):
        trace, kls = self.infer_layer(x, noise)
        loglik = log_likelihood(x, trace.layer, self.config.likelihood)
        n = trace.layer.shape[0]
        return ElboTerms(elbo(loglik, kls), loglik, kls, n), trace

    def content_means(self, images: np.ndarray) -> np.ndarray:
        """Posterior mean of z_C per image (zero noise)"""
        noise = self.draw_noise(None, images.shape[0], zero=True)
        return self.encode(images, noise).q_content.mu.data.copy()

    def sample(self, rng: np.random.Generator, n: int):
        noise = self.draw_noise(rng, n)
        z_pose = noise.get(f"{self.prefix}pose")
        return self.decode(Tensor._wrap(noise[f"{self.prefix}content"]),
                           None if z_pose is None else Tensor._wrap(z_pose))


def check_unit_range(*images: Tensor):
    for img in images:
        lo, hi = float(img.data.min()), float(img.data.max())
        if lo < -RANGE_TOLERANCE or hi > 1.0 + RANGE_TOLERANCE:
            raise ContractError(f"image left [0, 1]: min={lo}, max={hi}")
