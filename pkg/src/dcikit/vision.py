"""Toy vision transformer exposing the per-layer features the connector fuses.

Images are square, scaled to [0, 1], grayscale by default. The encoder is
a standard patch embedding plus learned position embeddings followed by
pre-norm blocks; the output of every block is kept so downstream code can
fuse features from all depths, not just the final one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError


@dataclass(frozen=True)
class VisionConfig:
    image_size: int
    patch_size: int
    width: int
    layers: int
    heads: int
    channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by {self.heads} heads")
        if self.layers < 1:
            raise ConfigurationError("need at least one encoder block")
        if self.channels < 1:
            raise ConfigurationError("need at least one channel")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class LayerFeatureStack:
    """Ordered per-block features; index i holds the output of block i+1."""

    features: list[Tensor]

    def __post_init__(self):
        if not self.features:
            raise DimensionError("feature stack is empty")
        shape = self.features[0].shape
        for t in self.features[1:]:
            if t.shape != shape:
                raise DimensionError(f"feature shapes differ: {shape} vs {t.shape}")

    def __len__(self) -> int:
        return len(self.features)

    @property
    def last(self) -> Tensor:
        """The final block's feature map."""
        return self.features[-1]


def _patch_indices(cfg: VisionConfig) -> np.ndarray:
    """Flat gather indices mapping an image to rows of flattened patches."""
    s, p, c = cfg.image_size, cfg.patch_size, cfg.channels
    idx = np.arange(s * s * c).reshape((s, s, c) if c > 1 else (s, s))
    rows = []
    for pr in range(cfg.grid):
        for pc in range(cfg.grid):
            patch = idx[pr * p:(pr + 1) * p, pc * p:(pc + 1) * p]
            rows.append(patch.reshape(-1))
    return np.stack(rows)


def patchify(image: Tensor, cfg: VisionConfig) -> Tensor:
    """Split an image into non-overlapping patches, one flattened row each.

    Rows are ordered row-major over the patch grid; within a row the pixels
    are row-major too (with channels fastest when present).
    """
    expected = (cfg.image_size, cfg.image_size) if cfg.channels == 1 else \
        (cfg.image_size, cfg.image_size, cfg.channels)
    if image.shape != expected:
        raise DimensionError(f"patchify: image shape {image.shape}, expected {expected}")
    idx = _patch_indices(cfg)
    return ad.take_flat(image, idx, (cfg.tokens, cfg.patch_dim))


def init_vision_params(cfg: VisionConfig, seed: int | None = None) -> dict[str, np.ndarray]:
    """Deterministic initialization: matrices uniform(-1/sqrt(fan_in), ..),
    embeddings likewise with fan_in = width, biases zero, norm scales one."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params: dict[str, np.ndarray] = {}
    tf.init_linear(params, "vision.patch", rng, cfg.patch_dim, cfg.width)
    s = 1.0 / np.sqrt(cfg.width)
    params["vision.pos"] = rng.uniform(-s, s, size=(cfg.tokens, cfg.width))
    for i in range(cfg.layers):
        tf.init_block(params, f"vision.block{i}", rng, cfg.width, 4 * cfg.width)
    return params


def encode_all_layers(image: Tensor, cfg: VisionConfig,
                      params: dict[str, Tensor]) -> LayerFeatureStack:
    """Run the encoder, keeping every block's output.

    Returns one tokens-by-width tensor per block, in depth order.
    """
    x = tf.linear(patchify(image, cfg), params, "vision.patch")
    x = ad.add(x, params["vision.pos"])
    feats = []
    for i in range(cfg.layers):
        x = tf.block(x, params, f"vision.block{i}", cfg.heads)
        feats.append(x)
    return LayerFeatureStack(feats)
