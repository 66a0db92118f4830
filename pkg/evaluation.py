#!/usr/bin/env python3
"""
评估工具
- 冻结生成模型，取潜变量后验均值训练下游MLP分类器
- 基线：原始像素MLP、带STN的原始像素MLP
- 渲染：先验样本、规范姿态+最终图像、分层分解、类别平均
- 分解误差：先验采样合成图或叠加数据集上，推断图层与真实图层的最优匹配MAE
"""

import csv
import logging
import os
from dataclasses import dataclass
from itertools import permutations
from typing import Dict, List, Optional, Tuple

import numpy as np

import tensor_core as tc
from chart_generator import save_grid
from cstvae import CstVae, composite
from datasets import SPLIT_IDS, LabeledImageSet, true_layers
from errors import ConfigError, ContractError
from spatial_transformer import IDENTITY_PARAMS, AffineTransform, stn
from stvae import MLP, StVae
from tensor_core import Tensor
from training import AdagradState, adagrad_step

logger = logging.getLogger(__name__)

INPUT_KINDS = ("latent_means", "raw_pixels", "raw_pixels_with_stn")
RENDER_MODES = ("samples", "canonical_and_final", "decomposition", "class_averages")
REPORT_FIELDS = ["model", "input_kind", "train_acc", "test_acc", "seed"]
DECOMPOSITION_FIELDS = ["checkpoint", "split", "examples", "layer_mae"]
N_CLASSES = 10
# chance of naming both digits of an unordered pair
PAIR_CHANCE = 0.018
FEATURE_BATCH = 500


@dataclass
class ClassifierConfig:
    input_kind: str = "latent_means"
    hidden: int = 32
    epochs: int = 30
    seed: int = 0
    minibatch_size: int = 100
    learning_rate: float = 0.01
    # localisation net width for raw_pixels_with_stn
    stn_hidden: int = 32

    def __post_init__(self):
        if self.input_kind not in INPUT_KINDS:
            raise ConfigError(f"unknown input kind '{self.input_kind}', expected one of {INPUT_KINDS}")
        if min(self.hidden, self.epochs, self.minibatch_size, self.stn_hidden) <= 0:
            raise ConfigError("classifier widths, epochs and batch size must be positive")


@dataclass
class ClassifierReport:
    train_acc: float
    test_acc: float
    # pairs only: at least one of the two digits named
    train_single_acc: Optional[float] = None
    test_single_acc: Optional[float] = None
    steps: int = 0


def extract_features(model, images: np.ndarray) -> np.ndarray:
    """Posterior content means; [mu_C,1 | mu_C,2 | ...] for the layered model"""
    if not hasattr(model, "content_means"):
        raise ConfigError(f"{type(model).__name__} cannot produce latent features")
    images = np.asarray(images)
    chunks = [model.content_means(images[i:i + FEATURE_BATCH].astype(np.float64))
              for i in range(0, images.shape[0], FEATURE_BATCH)]
    return np.concatenate(chunks, axis=0)


# ------------------------------------------------------------ classifier

class DigitClassifier:
    """Two ReLU hidden layers, one 10-way softmax head per digit; optional STN front end"""

    def __init__(self, in_shape: Tuple[int, ...], heads: int, cfg: ClassifierConfig,
                 rng: np.random.Generator):
        self.in_shape = tuple(in_shape)
        self.heads = heads
        self.use_stn = cfg.input_kind == "raw_pixels_with_stn"
        d = int(np.prod(self.in_shape))
        self.mlp = MLP([d, cfg.hidden, cfg.hidden, N_CLASSES * heads], "relu", "none", rng, "classifier")
        self.localizer = None
        if self.use_stn:
            if len(self.in_shape) != 2:
                raise ConfigError("raw_pixels_with_stn needs image inputs")
            self.localizer = MLP([d, cfg.stn_hidden, 6], "tanh", "none", rng, "localizer")
            self.localizer.weights[-1].data[...] = 0.0
            self.localizer.biases[-1].data[...] = IDENTITY_PARAMS

    def parameters(self) -> Dict[str, Tensor]:
        params = dict(self.mlp.parameters())
        if self.localizer is not None:
            params.update(self.localizer.parameters())
        return params

    def logits(self, x: np.ndarray) -> Tensor:
        n = x.shape[0]
        flat = Tensor._wrap(np.asarray(x, dtype=np.float64).reshape(n, -1))
        if self.use_stn:
            transform = AffineTransform(self.localizer(flat))
            warped = stn(Tensor._wrap(np.asarray(x, dtype=np.float64)), transform)
            flat = tc.reshape(warped, (n, flat.shape[1]))
        return self.mlp(flat)

    def loss(self, x: np.ndarray, targets: np.ndarray) -> Tensor:
        """Summed softmax cross-entropy over heads; targets [n, heads]"""
        z = self.logits(x)
        total = None
        for h in range(self.heads):
            head = z[:, h * N_CLASSES:(h + 1) * N_CLASSES]
            onehot = np.eye(N_CLASSES)[targets[:, h]]
            part = tc.sum(tc.logsumexp(head, axis=1)) - tc.sum(head * Tensor._wrap(onehot))
            total = part if total is None else total + part
        return total

    def predict(self, x: np.ndarray) -> np.ndarray:
        z = self.logits(x).data.reshape(x.shape[0], self.heads, N_CLASSES)
        return z.argmax(axis=2)


def _as_targets(labels: np.ndarray) -> np.ndarray:
    """[n] -> [n, 1]; pairs sorted so each head owns a canonical slot"""
    labels = np.asarray(labels).astype(np.int64)
    if labels.ndim == 1:
        return labels[:, None]
    return np.sort(labels, axis=1)


def score(predicted: np.ndarray, labels: np.ndarray) -> Tuple[float, Optional[float]]:
    """(all digits right unordered, at least one digit right); the second is None for single digits"""
    targets = _as_targets(labels)
    if targets.shape[1] == 1:
        return float(np.mean(predicted[:, 0] == targets[:, 0])), None
    both = np.mean(np.sort(predicted, axis=1) == targets, axis=1) == 1.0
    either = np.zeros(len(targets), dtype=bool)
    for p in range(predicted.shape[1]):
        either |= np.any(predicted[:, p:p + 1] == targets, axis=1)
    return float(np.mean(both)), float(np.mean(either))


def train_classifier(train_x: np.ndarray, train_labels: np.ndarray, test_x: np.ndarray,
                     test_labels: np.ndarray, cfg: ClassifierConfig) -> ClassifierReport:
    """Adagrad on cross-entropy for a fixed number of epochs; inputs are features or images"""
    targets = _as_targets(train_labels)
    if np.unique(targets).size < 2:
        raise ConfigError("training labels contain a single class")
    if train_x.shape[0] != targets.shape[0] or test_x.shape[0] != len(test_labels):
        raise ContractError("inputs and labels differ in length")

    rng = np.random.default_rng([cfg.seed, 4])
    model = DigitClassifier(train_x.shape[1:], targets.shape[1], cfg, rng)
    params = model.parameters()
    state = AdagradState(cfg.learning_rate)
    n = train_x.shape[0]
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            loss = model.loss(train_x[idx], targets[idx])
            for p in params.values():
                p.zero_grad()
            loss.backward()
            step += 1
            adagrad_step(params, {k: p.grad for k, p in params.items()}, state, step=step)
            total += loss.item()
        logger.debug(f"classifier epoch {epoch + 1}/{cfg.epochs}: loss/example {total / n:.4f}")

    train_acc, train_single = score(_predict_batched(model, train_x), train_labels)
    test_acc, test_single = score(_predict_batched(model, test_x), test_labels)
    logger.info(f"classifier ({cfg.input_kind}, hidden {cfg.hidden}): train {train_acc:.4f}, test {test_acc:.4f}")
    if test_single is not None:
        logger.info(f"single-digit accuracy: train {train_single:.4f}, test {test_single:.4f} "
                    f"(both-digit chance {PAIR_CHANCE})")
    return ClassifierReport(train_acc, test_acc, train_single, test_single, step)


def _predict_batched(model: DigitClassifier, x: np.ndarray) -> np.ndarray:
    return np.concatenate([model.predict(x[i:i + FEATURE_BATCH])
                           for i in range(0, x.shape[0], FEATURE_BATCH)], axis=0)


def classify(model, train_set, test_set, cfg: ClassifierConfig) -> ClassifierReport:
    """Route by input kind: frozen-model features or raw images"""
    if cfg.input_kind == "latent_means":
        if model is None:
            raise ConfigError("latent_means features need a model checkpoint")
        train_x = extract_features(model, train_set.images)
        test_x = extract_features(model, test_set.images)
    elif cfg.input_kind == "raw_pixels":
        train_x = train_set.images.reshape(len(train_set), -1).astype(np.float64)
        test_x = test_set.images.reshape(len(test_set), -1).astype(np.float64)
    else:
        train_x = train_set.images.astype(np.float64)
        test_x = test_set.images.astype(np.float64)
    return train_classifier(train_x, train_set.labels, test_x, test_set.labels, cfg)


def write_accuracy_report(path: str, model_name: str, cfg: ClassifierConfig, report: ClassifierReport):
    """Append one row (header written on first use)"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    file_exists = os.path.isfile(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=REPORT_FIELDS)
        if not file_exists:
            writer.writeheader()
        writer.writerow({
            "model": model_name,
            "input_kind": cfg.input_kind,
            "train_acc": f"{report.train_acc:.6f}",
            "test_acc": f"{report.test_acc:.6f}",
            "seed": cfg.seed,
        })


# ------------------------------------------------------------- renders

def _canonical_estimates(layer: StVae, images: np.ndarray) -> np.ndarray:
    noise = layer.draw_noise(None, images.shape[0], zero=True)
    return layer.encode(images, noise).canonical_estimate.data


def render(model, mode: str, out_dir: str, images: Optional[np.ndarray] = None,
           labels: Optional[np.ndarray] = None, n: int = 8, seed: int = 0) -> List[str]:
    """Write image grids for one mode; returns the PNG paths"""
    if mode not in RENDER_MODES:
        raise ConfigError(f"unknown render mode '{mode}', expected one of {RENDER_MODES}")
    rng = np.random.default_rng([seed, 5])
    stem = os.path.join(out_dir, mode)

    if mode == "samples":
        if isinstance(model, CstVae):
            rows = [model.sample(rng, n)[1].data for _ in range(n)]
        else:
            rows = [model.sample(rng, n)[2].data for _ in range(n)]
        grid = np.stack(rows)

    elif mode == "canonical_and_final":
        if isinstance(model, CstVae):
            rows, layers = [], []
            for layer in model.layers:
                canonical, _, warped = layer.sample(rng, n)
                rows.extend([canonical.data, warped.data])
                layers.append(warped)
            rows.append(composite(layers).data)
        else:
            canonical, _, final = model.sample(rng, n)
            rows = [canonical.data, final.data]
        grid = np.stack(rows)

    elif mode == "decomposition":
        if images is None:
            raise ContractError("decomposition needs input images")
        x = np.asarray(images[:n], dtype=np.float64)
        if isinstance(model, CstVae):
            d = model.decompose(x)
            columns = [d.image, d.reconstruction, *d.layers]
        else:
            noise = model.draw_noise(None, x.shape[0], zero=True)
            trace, _ = model.infer_layer(x, noise)
            columns = [x, trace.layer.data]
        grid = np.stack(columns, axis=1)

    else:
        if images is None or labels is None:
            raise ContractError("class averages need images and labels")
        labels = np.asarray(labels)
        if labels.ndim != 1:
            raise ContractError("class averages need single-digit labels")
        layer = model.layers[0] if isinstance(model, CstVae) else model
        canon = np.concatenate([_canonical_estimates(layer, images[i:i + FEATURE_BATCH].astype(np.float64))
                                for i in range(0, len(images), FEATURE_BATCH)])
        h, w = canon.shape[1:]
        means = [canon[labels == k].mean(axis=0) if np.any(labels == k) else np.zeros((h, w))
                 for k in range(N_CLASSES)]
        grid = np.stack(means)[None]

    png, _ = save_grid(grid, stem)
    return [png]


# ------------------------------------------------ decomposition checks

def generate_composites(model: CstVae, n: int, seed: int = 0,
                        split: str = "train") -> Tuple[np.ndarray, np.ndarray]:
    """Binary composites of prior samples plus their [n, layers, h, w] generating layers"""
    rng = np.random.default_rng([seed, 6, SPLIT_IDS[split]])
    layers, _ = model.sample(rng, n)
    binary = [(layer.data > 0.5).astype(np.float64) for layer in layers]
    images = composite(binary).data
    return images, np.stack(binary, axis=1)


def generated_set(model: CstVae, n: int, seed: int = 0, split: str = "train") -> LabeledImageSet:
    """Sampled composites as a dataset split; labels are -1, layers are kept"""
    images, layers = generate_composites(model, n, seed, split)
    logger.info(f"Sampled {n} {split} composites from {len(model.layers)} prior layers")
    return LabeledImageSet(images.astype(np.float32), np.full(n, -1, dtype=np.int64), split,
                           layers=layers.astype(np.float32))


def decomposition_error(model: CstVae, images: np.ndarray, layers: np.ndarray) -> float:
    """Mean absolute error of inferred layers, best layer matching per image"""
    if not isinstance(model, CstVae):
        raise ConfigError(f"{type(model).__name__} does not infer layers")
    images = np.asarray(images)
    layers = np.asarray(layers, dtype=np.float64)
    k = len(model.layers)
    expected = (images.shape[0], k) + images.shape[1:]
    if layers.shape != expected:
        raise ContractError(f"ground truth layers {layers.shape}, expected {expected}")
    if images.shape[0] == 0:
        raise ContractError("no images to decompose")
    orders = [list(p) for p in permutations(range(k))]
    best = []
    for i in range(0, images.shape[0], FEATURE_BATCH):
        d = model.decompose(images[i:i + FEATURE_BATCH].astype(np.float64))
        inferred = np.stack(d.layers, axis=1)
        truth = layers[i:i + FEATURE_BATCH]
        per_order = [np.abs(inferred[:, p] - truth).mean(axis=(1, 2, 3)) for p in orders]
        best.append(np.min(np.stack(per_order), axis=0))
    return float(np.concatenate(best).mean())


def evaluate_decomposition(model: CstVae, s: LabeledImageSet, limit: Optional[int] = None) -> Tuple[int, float]:
    """(examples, layer MAE) against a set's stored or provenance-rebuilt layers"""
    if limit is not None:
        s = s.take(limit)
    mae = decomposition_error(model, s.images, true_layers(s))
    logger.info(f"decomposition on {len(s)} {s.split} images: layer MAE {mae:.6f}")
    return len(s), mae


def write_decomposition_report(path: str, checkpoint: str, split: str, examples: int, mae: float):
    """Append one row (header written on first use)"""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    file_exists = os.path.isfile(path)
    with open(path, "a", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=DECOMPOSITION_FIELDS)
        if not file_exists:
            writer.writeheader()
        writer.writerow({
            "checkpoint": checkpoint,
            "split": split,
            "examples": examples,
            "layer_mae": f"{mae:.6f}",
        })
