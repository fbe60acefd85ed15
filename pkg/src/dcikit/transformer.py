"""Pre-norm transformer blocks shared by the vision encoder and the decoder.

Parameters live in flat dicts of float64 arrays keyed by dotted names, so
the same containers feed initialization, the optimizer, and serialization.
Forward functions take the already tape-wrapped tensors.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigurationError

LN_EPS = 1e-5


def init_linear(params: dict, prefix: str, rng: np.random.Generator,
                fan_in: int, fan_out: int) -> None:
    """Weight uniform in (-s, s) with s = 1/sqrt(fan_in); bias zero."""
    s = 1.0 / math.sqrt(fan_in)
    params[f"{prefix}.w"] = rng.uniform(-s, s, size=(fan_in, fan_out))
    params[f"{prefix}.b"] = np.zeros(fan_out)


def init_block(params: dict, prefix: str, rng: np.random.Generator,
               width: int, mlp_hidden: int) -> None:
    params[f"{prefix}.ln1.g"] = np.ones(width)
    params[f"{prefix}.ln1.b"] = np.zeros(width)
    for name in ("q", "v", "o"):
        init_linear(params, f"{prefix}.attn.{name}", rng, width, width)
    # no key bias: a constant added to every key shifts each score row
    # uniformly, which softmax cancels, so the parameter would be inert
    s = 1.0 / math.sqrt(width)
    params[f"{prefix}.attn.k.w"] = rng.uniform(-s, s, size=(width, width))
    params[f"{prefix}.ln2.g"] = np.ones(width)
    params[f"{prefix}.ln2.b"] = np.zeros(width)
    init_linear(params, f"{prefix}.mlp.fc1", rng, width, mlp_hidden)
    init_linear(params, f"{prefix}.mlp.fc2", rng, mlp_hidden, width)


def linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return ad.add_bias(ad.matmul(x, p[f"{prefix}.w"]), p[f"{prefix}.b"])


def causal_mask(n: int) -> Tensor:
    """Additive mask: 0 at or below the diagonal, large negative above."""
    m = np.where(np.tril(np.ones((n, n), dtype=bool)), 0.0, -1e9)
    return Tensor.const(m)


def attention(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int,
              mask: Tensor | None = None) -> Tensor:
    """Multi-head self-attention over a t-by-width input."""
    t, width = x.shape
    if width % heads:
        raise ConfigurationError(f"width {width} not divisible by {heads} heads")
    hd = width // heads
    q = linear(x, p, f"{prefix}.attn.q")
    k = ad.matmul(x, p[f"{prefix}.attn.k.w"])
    v = linear(x, p, f"{prefix}.attn.v")
    outs = []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        qh = ad.slice_channels(q, lo, hi)
        kh = ad.slice_channels(k, lo, hi)
        vh = ad.slice_channels(v, lo, hi)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(hd))
        if mask is not None:
            scores = ad.add(scores, mask)
        outs.append(ad.matmul(ad.softmax_rows(scores), vh))
    merged = outs[0] if heads == 1 else ad.concat_channels(outs)
    return linear(merged, p, f"{prefix}.attn.o")


def block(x: Tensor, p: dict[str, Tensor], prefix: str, heads: int,
          mask: Tensor | None = None) -> Tensor:
    """Pre-norm residual block: attention then a GELU MLP."""
    xn = ad.layer_norm(x, p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"], LN_EPS)
    a = ad.add(x, attention(xn, p, prefix, heads, mask))
    an = ad.layer_norm(a, p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"], LN_EPS)
    h = ad.gelu(linear(an, p, f"{prefix}.mlp.fc1"))
    return ad.add(a, linear(h, p, f"{prefix}.mlp.fc2"))


def wrap_params(arrays: dict[str, np.ndarray], tape: "ad.Tape | None") -> dict[str, Tensor]:
    """Wrap raw parameter arrays as tape leaves (or constants if tape is None)."""
    if tape is None:
        return {k: Tensor.const(v) for k, v in arrays.items()}
    return {k: tape.leaf(v) for k, v in arrays.items()}
