"""Dense channel integration (DCI) connector and the two-layer projector.

Encoder blocks are split into contiguous groups of equal size; each group
is averaged element-wise into one fused feature map, and the fused maps
are concatenated with the final block's features along the channel axis.
The widened embedding then goes through the usual Linear-GELU-Linear
projector. With DCI off, the projector sees the final block's features
alone (the standard path). Note the final block's features appear twice
on the DCI path: inside the last group's average and as the trailing
concat slice; that duplication is intentional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import transformer as tf
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError
from .vision import LayerFeatureStack


@dataclass(frozen=True)
class ConnectorConfig:
    layers: int
    groups: int
    width: int
    hidden: int
    lm_width: int
    dci_enabled: bool = True

    def __post_init__(self):
        if not (1 <= self.groups <= self.layers):
            raise ConfigurationError(
                f"groups must be in [1, layers]; got groups={self.groups}, layers={self.layers}")
        if self.layers % self.groups:
            raise ConfigurationError(
                f"layers {self.layers} not divisible into {self.groups} equal groups")

    @property
    def group_size(self) -> int:
        return self.layers // self.groups

    @property
    def projector_in(self) -> int:
        """Channel width the projector's first layer must accept."""
        return (self.groups + 1) * self.width if self.dci_enabled else self.width


@dataclass
class VisionEmbedding:
    """Pre-projection vision embedding; tokens by (groups+1)*width when fused."""

    features: Tensor

    @property
    def width(self) -> int:
        return self.features.shape[1]


def fuse_groups(stack: LayerFeatureStack, cfg: ConnectorConfig) -> list[Tensor]:
    """Average each contiguous group of block features element-wise.

    Group i (0-based) covers blocks i*M .. (i+1)*M - 1 with M = layers/groups,
    so the final block always lands in the last group.
    """
    if len(stack) != cfg.layers:
        raise DimensionError(f"stack has {len(stack)} layers, config says {cfg.layers}")
    m = cfg.group_size
    return [ad.reduce_mean(stack.features[i * m:(i + 1) * m]) for i in range(cfg.groups)]


def assemble_embedding(group_means: list[Tensor], last_layer: Tensor,
                       cfg: ConnectorConfig) -> VisionEmbedding:
    """Concatenate group means and the final block's features channel-wise."""
    if len(group_means) != cfg.groups:
        raise DimensionError(f"{len(group_means)} group means for {cfg.groups} groups")
    fused = ad.concat_channels(list(group_means) + [last_layer])
    expected = (cfg.groups + 1) * cfg.width
    if fused.shape[1] != expected:
        raise DimensionError(f"fused width {fused.shape[1]}, expected {expected}")
    return VisionEmbedding(fused)


def connect(stack: LayerFeatureStack, cfg: ConnectorConfig,
            params: dict[str, Tensor]) -> Tensor:
    """Project vision features into the language model's embedding space.

    DCI on: fuse groups, concat with the final features, project.
    DCI off: project the final block's features directly.
    """
    if cfg.dci_enabled:
        embedding = assemble_embedding(fuse_groups(stack, cfg), stack.last, cfg).features
    else:
        embedding = stack.last
    w1 = params["connector.fc1.w"]
    if w1.shape[0] != cfg.projector_in:
        raise ConfigurationError(
            f"projector expects input width {w1.shape[0]}, config needs {cfg.projector_in}")
    h = ad.gelu(tf.linear(embedding, params, "connector.fc1"))
    return tf.linear(h, params, "connector.fc2")


def init_projector_params(cfg: ConnectorConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    tf.init_linear(params, "connector.fc1", rng, cfg.projector_in, cfg.hidden)
    tf.init_linear(params, "connector.fc2", rng, cfg.hidden, cfg.lm_width)
    return params


@dataclass(frozen=True)
class ParamCountReport:
    """Projector parameter counts with and without the widened first layer."""

    base: int
    with_dci: int

    @property
    def delta(self) -> int:
        return self.with_dci - self.base

    def delta_fraction_of(self, total: int) -> float:
        """Extra trainable parameters as a fraction of some model total."""
        if total <= 0:
            raise ConfigurationError("total parameter count must be positive")
        return self.delta / total


def connector_param_count(cfg: ConnectorConfig) -> ParamCountReport:
    """Count projector parameters for the standard and fused input widths.

    Fusion itself is parameter-free; the only delta is the first projector
    layer widening from width to (groups+1)*width, i.e. groups*width*hidden.
    """
    d, h, e, g = cfg.width, cfg.hidden, cfg.lm_width, cfg.groups
    base = d * h + h + h * e + e
    with_dci = (g + 1) * d * h + h + h * e + e
    return ParamCountReport(base=base, with_dci=with_dci)
