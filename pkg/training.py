#!/usr/bin/env python3
"""
训练框架
Adagrad + 正态先验权重衰减 + Glorot初始化 + 检查点 + 指标CSV日志
"""

import csv
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Dict, Optional, Union, get_args, get_origin

import numpy as np
from tqdm import tqdm

import tensor_store
from errors import ConfigError, DimensionError, DivergenceError, SingularTransformError

logger = logging.getLogger(__name__)

# (content_dim, content_hidden) per model kind; two layers of 20 + 6 keep the
# layered model at 52 latent dimensions
CONTENT_DEFAULTS = {"vae": (50, 256), "stvae": (50, 256), "cstvae": (20, 128)}
METRICS_FIELDS = ["step", "split", "elbo_per_example", "kl_total", "loglik", "skips"]
ADAGRAD_EPSILON = 1e-8


def glorot_init(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out))"""
    if fan_in <= 0 or fan_out <= 0:
        raise ConfigError(f"fans must be positive, got {fan_in}, {fan_out}")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class AdagradState:
    learning_rate: float = 0.01
    epsilon: float = ADAGRAD_EPSILON
    accumulators: Dict[str, np.ndarray] = field(default_factory=dict)


def adagrad_step(params: Dict, grads: Dict[str, np.ndarray], state: AdagradState,
                 weight_decay: float = 0.0, step: int = -1):
    """acc += g^2; theta -= lr * g / (sqrt(acc) + eps), with g += weight_decay * theta"""
    # 先全部检查，避免参数被部分更新
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise DimensionError(f"gradient for '{name}' has shape {g.shape}, parameter {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(name, step)

    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p.data
        acc = state.accumulators.get(name)
        if acc is None:
            acc = state.accumulators[name] = np.zeros_like(p.data)
        acc += g * g
        p.data -= state.learning_rate * g / (np.sqrt(acc) + state.epsilon)


@dataclass
class TrainConfig:
    model: str = "stvae"
    minibatch_size: int = 100
    learning_rate: float = 0.01
    weight_decay_lambda: float = 1.0
    max_steps: int = 250000
    seed: int = 0
    content_dim: Optional[int] = None
    pose_dim: int = 6
    content_hidden: Optional[int] = None
    pose_hidden: int = 32
    hidden_layers: int = 2
    layers: int = 2
    tie_layers: bool = False
    likelihood: str = "bernoulli"
    gaussian_variance: float = 0.1
    logit_link: bool = False
    kl_mode: str = "analytic"
    samples: int = 1
    eval_every: int = 1000
    eval_examples: int = 2000
    checkpoint_every: int = 5000
    max_skip_rate: float = 0.001
    check_ranges: bool = False

    def __post_init__(self):
        if self.model not in ("vae", "stvae", "cstvae"):
            raise ConfigError(f"unknown model kind '{self.model}'")
        dim, hidden = CONTENT_DEFAULTS[self.model]
        if self.content_dim is None:
            self.content_dim = dim
        if self.content_hidden is None:
            self.content_hidden = hidden
        positive = ["minibatch_size", "max_steps", "content_dim", "pose_dim", "content_hidden",
                    "pose_hidden", "hidden_layers", "layers", "samples", "eval_every",
                    "eval_examples", "checkpoint_every"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0 or self.weight_decay_lambda < 0:
            raise ConfigError("learning_rate and weight_decay_lambda must be non-negative")

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        """Build from loosely typed values (config files, CLI flags); unknown keys are rejected"""
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in values.items():
            if key not in types:
                raise ConfigError(f"unknown training option '{key}'")
            kwargs[key] = _coerce(value, types[key], key)
        return cls(**kwargs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(value, kind, key: str):
    if get_origin(kind) is Union:
        if value is None:
            return None
        kind = next(arg for arg in get_args(kind) if arg is not type(None))
    if isinstance(value, kind) and not (kind is int and isinstance(value, bool)):
        return value
    try:
        if kind is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered in ("1", "true", "yes", "on"):
                    return True
                if lowered in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if kind is int:
            return int(float(value)) if isinstance(value, str) and "e" in value.lower() else int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"option '{key}' expects {kind.__name__}, got {value!r}") from None


@dataclass
class TrainResult:
    steps: int
    final_train: dict
    final_test: Optional[dict]
    skips: int
    checkpoint: Optional[str]


class Trainer:
    """One optimizer state, one model, one seeded stream of minibatches and noise"""

    def __init__(self, config: TrainConfig, model, train_images: np.ndarray,
                 test_images: Optional[np.ndarray] = None, run_dir: Optional[str] = None):
        self.config = config
        self.model = model
        self.train_images = np.asarray(train_images)
        self.test_images = None if test_images is None else np.asarray(test_images)
        self.run_dir = run_dir
        self.rng = np.random.default_rng([config.seed, 1])
        self.state = AdagradState(config.learning_rate)
        self.step = 0
        self.skips = 0
        self.examples_seen = 0
        self._order = np.arange(0)
        self._cursor = 0
        self.last_train: dict = {}
        self.last_checkpoint: Optional[str] = None
        self.last_test: Optional[dict] = None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)

    # ------------------------------------------------------------ batching

    @property
    def train_size(self) -> int:
        return self.train_images.shape[0]

    def next_batch(self) -> np.ndarray:
        b = min(self.config.minibatch_size, self.train_size)
        if self._cursor + b > self._order.size:
            self._order = self.rng.permutation(self.train_size)
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + b]
        self._cursor += b
        return idx

    # ----------------------------------------------------------- objective

    def objective(self, x: np.ndarray, rng: np.random.Generator):
        """Average bound over `samples` posterior draws; drops examples whose pose is singular"""
        terms = []
        skipped = 0
        for _ in range(self.config.samples):
            noise = self.model.draw_noise(rng, x.shape[0])
            batch = x
            while True:
                try:
                    result, _ = self.model.elbo_step(batch, noise)
                    break
                except SingularTransformError as e:
                    keep = np.setdiff1d(np.arange(batch.shape[0]), e.rows)
                    skipped += len(e.rows)
                    logger.warning(f"step {self.step}: skipped {len(e.rows)} example(s), det={e.det}")
                    if keep.size == 0:
                        result = None
                        break
                    batch = batch[keep]
                    noise = {k: v[keep] for k, v in noise.items()}
            if result is not None:
                terms.append(result)
        return terms, skipped

    def train_step(self) -> dict:
        cfg = self.config
        params = self.model.parameters()
        x = self.train_images[self.next_batch()].astype(np.float64)
        terms, skipped = self.objective(x, self.rng)
        self.skips += skipped
        self.examples_seen += x.shape[0]
        if not terms:
            self.step += 1
            return {}

        loss = None
        for t in terms:
            part = (-1.0 / len(terms)) * t.elbo
            loss = part if loss is None else loss + part
        if not np.isfinite(loss.item()):
            self._abort_divergence("loss")

        for p in params.values():
            p.zero_grad()
        loss.backward()
        grads = {name: p.grad for name, p in params.items()}
        # 权重衰减：N(0,1)先验按 batch/train_size 分摊到每个小批量
        decay = cfg.weight_decay_lambda * x.shape[0] / self.train_size
        try:
            adagrad_step(params, grads, self.state, weight_decay=decay, step=self.step + 1)
        except DivergenceError as e:
            self._abort_divergence(e.parameter)
        self.step += 1

        n = sum(t.n for t in terms) / len(terms)
        self.last_train = {
            "elbo_per_example": float(np.mean([t.elbo.item() for t in terms])) / n,
            "kl_total": float(np.mean([t.kl_total for t in terms])) / n,
            "loglik": float(np.mean([t.loglik.item() for t in terms])) / n,
        }
        return self.last_train

    def _abort_divergence(self, parameter: str):
        logger.error(f"Divergence in '{parameter}' after step {self.step}; "
                     f"newest checkpoint: {self.last_checkpoint}")
        raise DivergenceError(parameter, self.step + 1, checkpoint=self.last_checkpoint)

    def evaluate(self, images: Optional[np.ndarray] = None) -> Optional[dict]:
        """Bound on a fixed test subsample, with noise that does not disturb the training stream"""
        images = self.test_images if images is None else images
        if images is None or images.shape[0] == 0:
            return None
        cfg = self.config
        k = min(cfg.eval_examples, images.shape[0])
        subset = np.random.default_rng([cfg.seed, 3]).permutation(images.shape[0])[:k]
        rng = np.random.default_rng([cfg.seed, 2, self.step])
        totals = {"elbo": 0.0, "kl": 0.0, "loglik": 0.0, "n": 0}
        for start in range(0, k, cfg.minibatch_size):
            batch = images[subset[start:start + cfg.minibatch_size]].astype(np.float64)
            terms, skipped = self.objective(batch, rng)
            for t in terms:
                totals["elbo"] += t.elbo.item() / len(terms)
                totals["kl"] += t.kl_total / len(terms)
                totals["loglik"] += t.loglik.item() / len(terms)
            totals["n"] += (sum(t.n for t in terms) / len(terms)) if terms else 0
        n = max(totals["n"], 1)
        return {"elbo_per_example": totals["elbo"] / n, "kl_total": totals["kl"] / n,
                "loglik": totals["loglik"] / n}

    # ------------------------------------------------------------ main loop

    def train(self, max_steps: Optional[int] = None, progress: bool = True) -> TrainResult:
        cfg = self.config
        target = cfg.max_steps if max_steps is None else max_steps
        logger.info(f"Training {cfg.model} for steps {self.step + 1}..{target} "
                    f"(batch {cfg.minibatch_size}, lr {cfg.learning_rate}, seed {cfg.seed})")
        checkpoint = None
        bar = tqdm(total=target - self.step, disable=not (progress and sys.stderr.isatty()),
                   desc=cfg.model, unit="step")
        while self.step < target:
            metrics = self.train_step()
            bar.update(1)
            if metrics:
                self.log_metrics("train", metrics)
                bar.set_postfix(elbo=f"{metrics['elbo_per_example']:.2f}")
            if self.step % cfg.eval_every == 0 or self.step == target:
                self.last_test = self.evaluate()
                if self.last_test is not None:
                    self.log_metrics("test", self.last_test)
                    logger.info(f"step {self.step}: test ELBO/example {self.last_test['elbo_per_example']:.4f}")
            if self.run_dir and (self.step % cfg.checkpoint_every == 0 or self.step == target):
                checkpoint = self.save_checkpoint(
                    os.path.join(self.run_dir, "checkpoints", f"step_{self.step:08d}"))
                self.last_checkpoint = checkpoint
        bar.close()

        rate = self.skips / max(self.examples_seen, 1)
        if rate > cfg.max_skip_rate:
            logger.error(f"singular-transform skip rate {rate:.4%} exceeds {cfg.max_skip_rate:.4%}")
            raise DivergenceError("skip_rate", self.step)
        return TrainResult(self.step, self.last_train, self.last_test, self.skips, checkpoint)

    def log_metrics(self, split: str, metrics: dict):
        """Append one row to metrics.csv (header written on first use)"""
        if not self.run_dir:
            return
        csv_file = os.path.join(self.run_dir, "metrics.csv")
        file_exists = os.path.isfile(csv_file)
        with open(csv_file, "a", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS)
            if not file_exists:
                writer.writeheader()
            writer.writerow({
                "step": self.step,
                "split": split,
                "elbo_per_example": repr(metrics["elbo_per_example"]),
                "kl_total": repr(metrics["kl_total"]),
                "loglik": repr(metrics["loglik"]),
                "skips": self.skips,
            })

    # ---------------------------------------------------------- checkpoints

    def save_checkpoint(self, directory: str) -> str:
        params = {f"param.{name}": p.data for name, p in self.model.parameters().items()}
        accs = {f"adagrad.{name}": acc for name, acc in self.state.accumulators.items()}
        registry = tensor_store.save_tensors(directory, {**params, **accs, "order": self._order}, width=8)
        tensor_store.write_manifest(directory, {
            "kind": "checkpoint",
            "config": self.config.to_dict(),
            "image_shape": list(self.train_images.shape[1:]),
            "step": self.step,
            "skips": self.skips,
            "examples_seen": self.examples_seen,
            "cursor": self._cursor,
            "rng_state": self.rng.bit_generator.state,
            "tensors": registry,
        })
        logger.info(f"Checkpoint saved: {directory}")
        return directory

    @classmethod
    def resume(cls, directory: str, model, train_images: np.ndarray,
               test_images: Optional[np.ndarray] = None, run_dir: Optional[str] = None) -> "Trainer":
        manifest = tensor_store.read_manifest(directory)
        if manifest.get("kind") != "checkpoint":
            raise ConfigError(f"{directory} is not a training checkpoint")
        config = TrainConfig.from_dict(manifest["config"])
        trainer = cls(config, model, train_images, test_images, run_dir)
        arrays = tensor_store.load_tensors(directory, manifest["tensors"])
        load_parameters(model, arrays)
        trainer.state.accumulators = {name[len("adagrad."):]: arr for name, arr in arrays.items()
                                      if name.startswith("adagrad.")}
        trainer._order = arrays["order"].astype(np.int64)
        trainer._cursor = manifest["cursor"]
        trainer.step = manifest["step"]
        trainer.skips = manifest["skips"]
        trainer.examples_seen = manifest["examples_seen"]
        trainer.rng.bit_generator.state = manifest["rng_state"]
        trainer.last_checkpoint = directory
        logger.info(f"Resumed from {directory} at step {trainer.step}")
        return trainer


def load_parameters(model, arrays: Dict[str, np.ndarray]):
    """Copy `param.<name>` arrays into the model; every model parameter must be present"""
    for name, p in model.parameters().items():
        key = f"param.{name}"
        if key not in arrays:
            raise ConfigError(f"checkpoint has no parameter '{name}' (model kind mismatch?)")
        if arrays[key].shape != p.data.shape:
            raise ConfigError(f"parameter '{name}' has shape {arrays[key].shape} in checkpoint, "
                              f"{p.data.shape} in model")
        p.data[...] = arrays[key]


def load_checkpoint_model(directory: str):
    """Rebuild the model recorded in a checkpoint and load its parameters"""
    manifest = tensor_store.read_manifest(directory)
    if manifest.get("kind") != "checkpoint":
        raise ConfigError(f"{directory} is not a training checkpoint")
    config = TrainConfig.from_dict(manifest["config"])
    model = build_model_from_config(config, manifest["image_shape"])
    load_parameters(model, tensor_store.load_tensors(directory, manifest["tensors"]))
    return model, config


def build_model_from_config(config: TrainConfig, image_shape):
    from cstvae import build_model

    h, w = image_shape
    return build_model(
        config.model, h, w, np.random.default_rng(config.seed), content_dim=config.content_dim,
        pose_dim=config.pose_dim, content_hidden=config.content_hidden, pose_hidden=config.pose_hidden,
        hidden_layers=config.hidden_layers, n_layers=config.layers, tie_layers=config.tie_layers,
        likelihood=config.likelihood, gaussian_variance=config.gaussian_variance,
        logit_link=config.logit_link, kl_mode=config.kl_mode, check_ranges=config.check_ranges,
    )
