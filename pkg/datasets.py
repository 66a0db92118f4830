#!/usr/bin/env python3
"""
MNIST数据读取与派生数据集
- IDX格式解析（大端序，支持gzip）
- 二值化MNIST、TranslatedMNIST(36x36)、Superimposed MNIST(50x50)
每张合成图像使用派生种子 (master_seed, split, index)，任意顺序生成结果都相同
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

import tensor_store
from errors import ConfigError, ContractError, DimensionError, FormatError
from spatial_transformer import resample_array

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DEFAULT_THRESHOLD = 0.5
SPLIT_IDS = {"train": 0, "test": 1}


@dataclass
class LabeledImageSet:
    """images [n, h, w] in [0, 1]; labels [n] (digit) or [n, 2] (digit pair, as drawn)"""

    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    # superimposed sets: [n, 2, 3] rows of (source index, offset y, offset x), back layer first
    provenance: Optional[np.ndarray] = None
    # digit images the provenance indices point into
    source: Optional[np.ndarray] = None
    # sampled sets: [n, k, h, w] generating layers, back first
    layers: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DimensionError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.split not in SPLIT_IDS:
            raise ConfigError(f"split must be 'train' or 'test', got '{self.split}'")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]

    @property
    def is_binary(self) -> bool:
        return bool(np.all((self.images == 0) | (self.images == 1)))

    def take(self, n: int) -> "LabeledImageSet":
        """First n examples (desk-scale experiments)"""
        prov = None if self.provenance is None else self.provenance[:n]
        layers = None if self.layers is None else self.layers[:n]
        return replace(self, images=self.images[:n], labels=self.labels[:n], provenance=prov, layers=layers)


# ------------------------------------------------------------------ IDX

def _read_bytes(path: str) -> bytes:
    if not os.path.exists(path):
        raise FileNotFoundError(f"IDX file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path: str, expected_magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError("file too short for an IDX magic number", offset=len(raw), path=path)
    (magic,) = struct.unpack_from(">I", raw, 0)
    if magic != expected_magic:
        raise FormatError(f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0, path=path)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError("truncated IDX dimensions", offset=len(raw), path=path)
    dims = struct.unpack_from(f">{ndim}I", raw, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(raw) < header + size:
        raise FormatError(f"truncated IDX data: {len(raw) - header} of {size} bytes",
                          offset=len(raw), path=path)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: str, split: str = "train") -> LabeledImageSet:
    """Parse an IDX image/label pair; pixels scaled to [0, 1]"""
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images vs {labels.shape[0]} labels", offset=4, path=labels_path)
    logger.info(f"Loaded {images.shape[0]} images of {images.shape[1]}x{images.shape[2]} from {images_path}")
    return LabeledImageSet(images.astype(np.float32) / 255.0, labels.astype(np.int64), split)


def load_mnist(mnist_dir: str) -> Dict[str, LabeledImageSet]:
    """Standard file names, with or without .gz"""
    def find(stem):
        for candidate in (stem, stem + ".gz"):
            path = os.path.join(mnist_dir, candidate)
            if os.path.exists(path):
                return path
        raise FileNotFoundError(f"{stem}[.gz] not found in {mnist_dir}")

    return {
        "train": load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"), "train"),
        "test": load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"), "test"),
    }


# --------------------------------------------------------------- derived sets

def binarize(s: LabeledImageSet, threshold: float = DEFAULT_THRESHOLD) -> LabeledImageSet:
    if not 0.0 < threshold < 1.0:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    images = (s.images > threshold).astype(np.float32)
    return replace(s, images=images)


def resize_set(s: LabeledImageSet, out_h: int, out_w: int) -> LabeledImageSet:
    """Bilinear (align-corners) rescale of every image"""
    images = resample_array(s.images, out_h, out_w).astype(np.float32)
    return LabeledImageSet(np.clip(images, 0.0, 1.0), s.labels, s.split)


def _place(canvas: np.ndarray, digit: np.ndarray, oy: int, ox: int):
    h, w = digit.shape
    canvas[oy:oy + h, ox:ox + w] = digit


def translate_set(s: LabeledImageSet, canvas_h: int = 36, canvas_w: int = 36, seed: int = 0) -> LabeledImageSet:
    """Each digit at a uniform integer offset inside a black canvas"""
    n, h, w = s.images.shape
    if canvas_h < h or canvas_w < w:
        raise DimensionError(f"canvas {canvas_h}x{canvas_w} smaller than digits {h}x{w}")
    out = np.zeros((n, canvas_h, canvas_w), dtype=np.float32)
    for i in range(n):
        rng = np.random.default_rng([seed, SPLIT_IDS[s.split], i])
        oy = int(rng.integers(0, canvas_h - h + 1))
        ox = int(rng.integers(0, canvas_w - w + 1))
        _place(out[i], s.images[i], oy, ox)
    logger.info(f"Translated {n} {s.split} digits into {canvas_h}x{canvas_w} canvases")
    return LabeledImageSet(out, s.labels, s.split)


def _layer(source: np.ndarray, record, canvas: int) -> np.ndarray:
    idx, oy, ox = (int(v) for v in record)
    layer = np.zeros((canvas, canvas), dtype=np.float32)
    _place(layer, source[idx], oy, ox)
    return layer


def superimpose_set(s: LabeledImageSet, canvas: int = 50, n_images: Optional[int] = None,
                    seed: int = 0) -> LabeledImageSet:
    """Two translated digits (drawn with replacement) composited second-over-first

    Defaults to 100000 images for the train split and 50000 for test.
    """
    n_src, h, w = s.images.shape
    if canvas < h or canvas < w:
        raise DimensionError(f"canvas {canvas} smaller than digits {h}x{w}")
    if n_src < 1:
        raise ContractError("source set is empty")
    if n_images is None:
        n_images = 100000 if s.split == "train" else 50000

    images = np.zeros((n_images, canvas, canvas), dtype=np.float32)
    labels = np.zeros((n_images, 2), dtype=np.int64)
    provenance = np.zeros((n_images, 2, 3), dtype=np.int64)
    for i in range(n_images):
        rng = np.random.default_rng([seed, SPLIT_IDS[s.split], i])
        for j in range(2):
            provenance[i, j] = (int(rng.integers(0, n_src)),
                                int(rng.integers(0, canvas - h + 1)),
                                int(rng.integers(0, canvas - w + 1)))
        back = _layer(s.images, provenance[i, 0], canvas)
        front = _layer(s.images, provenance[i, 1], canvas)
        images[i] = front + (1.0 - front) * back
        labels[i] = s.labels[provenance[i, :, 0]]
    logger.info(f"Superimposed {n_images} {s.split} images on {canvas}x{canvas} canvases")
    return LabeledImageSet(images, labels, s.split, provenance, source=s.images)


def ground_truth_layers(superimposed: LabeledImageSet, source: Optional[LabeledImageSet] = None,
                        rows=None) -> np.ndarray:
    """Rebuild [n, 2, H, W] (back, front) layers from provenance records

    `source` defaults to the digit images stored with the set.
    """
    if superimposed.provenance is None:
        raise ContractError("set carries no provenance records")
    digits = superimposed.source if source is None else source.images
    if digits is None:
        raise ContractError("set carries no source digits for its provenance records")
    rows = np.arange(len(superimposed)) if rows is None else np.asarray(rows)
    canvas = superimposed.images.shape[1]
    return np.stack([[_layer(digits, rec, canvas) for rec in superimposed.provenance[r]] for r in rows])


def true_layers(s: LabeledImageSet, rows=None) -> np.ndarray:
    """Generating layers of a sampled or superimposed set, back first"""
    if s.layers is not None:
        return s.layers if rows is None else s.layers[np.asarray(rows)]
    if s.provenance is not None:
        return ground_truth_layers(s, rows=rows)
    raise ContractError(f"{s.split} set has no ground-truth layers")


# ------------------------------------------------------------ persistence

def save_dataset(directory: str, splits: Dict[str, LabeledImageSet], config: dict, seed: int) -> str:
    """Tensors (32-bit) + manifest with config, seed, counts and checksums"""
    arrays = {}
    for name, s in splits.items():
        arrays[f"{name}_images"] = s.images
        arrays[f"{name}_labels"] = s.labels
        if s.provenance is not None:
            arrays[f"{name}_provenance"] = s.provenance
        if s.source is not None:
            arrays[f"{name}_source"] = s.source
        if s.layers is not None:
            arrays[f"{name}_layers"] = s.layers
    registry = tensor_store.save_tensors(directory, arrays, width=4)
    tensor_store.write_manifest(directory, {
        "kind": "dataset",
        "config": config,
        "seed": seed,
        "counts": {name: len(s) for name, s in splits.items()},
        "decisions": {
            "binarize_threshold": config.get("threshold", DEFAULT_THRESHOLD),
            "translations": "integer pixel offsets, uniform",
            "pair_sampling": "uniform with replacement, same split",
            "layer_order": "first drawn is the back layer",
        },
        "tensors": registry,
    })
    logger.info(f"Dataset saved to {directory}: {', '.join(f'{k}={len(v)}' for k, v in splits.items())}")
    return directory


def load_dataset(directory: str) -> Dict[str, LabeledImageSet]:
    manifest = tensor_store.read_manifest(directory)
    if manifest.get("kind") != "dataset":
        raise ConfigError(f"{directory} is not a dataset directory")
    arrays = tensor_store.load_tensors(directory, manifest["tensors"])
    splits = {}
    for name in manifest["counts"]:
        prov = arrays.get(f"{name}_provenance")
        source = arrays.get(f"{name}_source")
        layers = arrays.get(f"{name}_layers")
        splits[name] = LabeledImageSet(
            arrays[f"{name}_images"].astype(np.float32),
            arrays[f"{name}_labels"].astype(np.int64),
            name,
            None if prov is None else prov.astype(np.int64),
            None if source is None else source.astype(np.float32),
            None if layers is None else layers.astype(np.float32),
        )
    return splits
