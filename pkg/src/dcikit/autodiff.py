"""Dense float64 tensors with reverse-mode automatic differentiation.

A small tape machine: leaves are registered on a :class:`Tape`, every
differentiable operation appends one node, and :func:`backward` sweeps the
tape once in reverse creation order. There is no broadcasting; binary
operations require identical shapes, and the only "mixed" shapes allowed
are the explicit ones (bias rows, channel slices). Everything is 64-bit
so central finite differences are a meaningful oracle for the gradients.

Distinct tapes share no state and may be used from different threads;
a single tape must be driven by one thread at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, EmptyReductionError

Array = np.ndarray

# tanh-approximation constant sqrt(2/pi); the derivative below differentiates
# the approximation itself, not exact GELU.
GELU_COEF = 0.7978845608028654
GELU_CUBIC = 0.044715


def _as_array(values) -> Array:
    arr = np.asarray(values, dtype=np.float64)
    # ascontiguousarray would promote 0-d scalars to 1-d; keep them 0-d
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr)


class Tensor:
    """Row-major float64 array, optionally tracked on a tape.

    ``data`` is always a contiguous ndarray; ``node_id`` is the position of
    the tensor's node on its tape, or None for untracked constants.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = _as_array(data)
        self.tape = tape
        self.node_id = node_id

    @classmethod
    def const(cls, data) -> "Tensor":
        """Untracked tensor: participates in ops but receives no gradient."""
        return cls(data)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def tolist(self):
        return self.data.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tracked})"


@dataclass
class Node:
    """One tape entry: operation kind, tracked input ids, and their vjps.

    ``vjps[i]`` maps the output gradient to the gradient contribution for
    ``input_ids[i]``. Saved forward values live in the vjp closures.
    """

    kind: str
    input_ids: tuple[int, ...]
    vjps: tuple[Callable[[Array], Array], ...]


class Tape:
    """Append-only operation record for one forward/backward run.

    Node ids are list indices, so inputs always precede their consumers.
    ``gradients`` is filled by :func:`backward` and maps node_id to the
    gradient tensor of the run's root with respect to that node.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.gradients: dict[int, Tensor] = {}

    def leaf(self, data) -> Tensor:
        """Register a differentiable leaf holding ``data``."""
        t = Tensor(data, tape=self, node_id=len(self.nodes))
        self.nodes.append(Node("leaf", (), ()))
        return t

    def grad(self, t: Tensor) -> Tensor:
        """Gradient for ``t`` after backward(); raises KeyError if absent."""
        if t.tape is not self or t.node_id is None:
            raise ContractError("tensor does not belong to this tape")
        return self.gradients[t.node_id]

    def _record(self, kind: str, out: Array, inputs: Sequence[Tensor],
                vjps: Sequence[Callable[[Array], Array]]) -> Tensor:
        nid = len(self.nodes)
        self.nodes.append(Node(kind, tuple(t.node_id for t in inputs), tuple(vjps)))
        return Tensor(out, tape=self, node_id=nid)


def _emit(kind: str, out: Array,
          partials: Sequence[tuple[Tensor, Callable[[Array], Array]]]) -> Tensor:
    """Wrap ``out``, recording vjps for whichever inputs are tracked."""
    tracked = [(t, vjp) for t, vjp in partials if t.tracked]
    if not tracked:
        return Tensor(out)
    tapes = {id(t.tape) for t, _ in tracked}
    if len(tapes) > 1:
        raise ContractError("operands belong to different tapes")
    tape = tracked[0][0].tape
    assert tape is not None
    return tape._record(kind, out, [t for t, _ in tracked], [v for _, v in tracked])


def _require_same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} differ")


def _require_2d(kind: str, t: Tensor) -> None:
    if t.data.ndim != 2:
        raise DimensionError(f"{kind}: expected a 2-D tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# arithmetic


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two 2-D tensors."""
    _require_2d("matmul", a)
    _require_2d("matmul", b)
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _emit("matmul", out, [
        (a, lambda g: g @ bd.T),
        (b, lambda g: ad.T @ g),
    ])


def add(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise sum; shapes must match exactly."""
    _require_same_shape("add", a, b)
    out = a.data + b.data
    return _emit("add", out, [(a, lambda g: g), (b, lambda g: g)])


def multiply(a: Tensor, b: Tensor) -> Tensor:
    """Element-wise (Hadamard) product; shapes must match exactly."""
    _require_same_shape("multiply", a, b)
    ad, bd = a.data, b.data
    return _emit("multiply", ad * bd, [(a, lambda g: g * bd), (b, lambda g: g * ad)])


def scale(x: Tensor, c: float) -> Tensor:
    """Multiply every element by the constant ``c``."""
    c = float(c)
    return _emit("scale", x.data * c, [(x, lambda g: g * c)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-d bias row to every row of a t-by-d tensor."""
    _require_2d("add_bias", x)
    if b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise DimensionError(f"add_bias: bias shape {b.shape} does not fit rows of {x.shape}")
    out = x.data + b.data
    return _emit("add_bias", out, [
        (x, lambda g: g),
        (b, lambda g: g.sum(axis=0)),
    ])


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("relu", np.maximum(xd, 0.0), [(x, lambda g: g * (xd > 0.0))])


def gelu(x: Tensor) -> Tensor:
    """GELU via the tanh approximation (coefficient 0.7978845608).

    The gradient is the exact derivative of the approximation.
    """
    xd = x.data
    inner = GELU_COEF * (xd + GELU_CUBIC * xd ** 3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def vjp(g: Array) -> Array:
        d_inner = GELU_COEF * (1.0 + 3.0 * GELU_CUBIC * xd ** 2)
        deriv = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t ** 2) * d_inner
        return g * deriv

    return _emit("gelu", out, [(x, vjp)])


_ELEMENTWISE_KINDS = ("add", "scale", "gelu", "relu")


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch the element-wise ops by name: add, scale, gelu, relu."""
    if kind == "add":
        return add(*operands)
    if kind == "scale":
        return scale(*operands)
    if kind == "gelu":
        return gelu(*operands)
    if kind == "relu":
        return relu(*operands)
    raise ContractError(f"unknown elementwise kind {kind!r}; expected one of {_ELEMENTWISE_KINDS}")


# ---------------------------------------------------------------------------
# reductions and reshaping


def _pairwise_sum(arrays: list[Array]) -> Array:
    # Pairwise tree so that means over 2^k identical inputs are exact.
    while len(arrays) > 1:
        nxt = [arrays[i] + arrays[i + 1] for i in range(0, len(arrays) - 1, 2)]
        if len(arrays) % 2:
            nxt.append(arrays[-1])
        arrays = nxt
    return arrays[0]


def reduce_mean(xs: Sequence[Tensor]) -> Tensor:
    """Element-wise arithmetic mean of same-shaped tensors."""
    if len(xs) == 0:
        raise EmptyReductionError("reduce_mean of an empty sequence")
    shape = xs[0].shape
    for t in xs[1:]:
        if t.shape != shape:
            raise DimensionError(f"reduce_mean: shapes {shape} and {t.shape} differ")
    n = len(xs)
    out = _pairwise_sum([t.data for t in xs]) / n
    inv = 1.0 / n
    return _emit("reduce_mean", out, [(t, lambda g: g * inv) for t in xs])


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _emit("reduce_sum", np.asarray(x.data.sum()),
                 [(x, lambda g: np.full(shape, float(g)))])


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate t-by-d_i tensors along the channel (last) dimension."""
    if len(xs) == 0:
        raise EmptyReductionError("concat_channels of an empty sequence")
    for t in xs:
        _require_2d("concat_channels", t)
    rows = xs[0].shape[0]
    for t in xs[1:]:
        if t.shape[0] != rows:
            raise DimensionError(
                f"concat_channels: token dimensions differ, {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=1)
    partials = []
    start = 0
    for t in xs:
        stop = start + t.shape[1]
        partials.append((t, lambda g, a=start, b=stop: g[:, a:b].copy()))
        start = stop
    return _emit("concat_channels", out, partials)


def concat_rows(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate t_i-by-d tensors along the token (first) dimension."""
    if len(xs) == 0:
        raise EmptyReductionError("concat_rows of an empty sequence")
    for t in xs:
        _require_2d("concat_rows", t)
    width = xs[0].shape[1]
    for t in xs[1:]:
        if t.shape[1] != width:
            raise DimensionError(
                f"concat_rows: channel widths differ, {xs[0].shape} vs {t.shape}")
    out = np.concatenate([t.data for t in xs], axis=0)
    partials = []
    start = 0
    for t in xs:
        stop = start + t.shape[0]
        partials.append((t, lambda g, a=start, b=stop: g[a:b, :].copy()))
        start = stop
    return _emit("concat_rows", out, partials)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Columns [start, stop) of a 2-D tensor."""
    _require_2d("slice_channels", x)
    if not (0 <= start <= stop <= x.shape[1]):
        raise DimensionError(f"slice_channels: [{start}, {stop}) outside width {x.shape[1]}")
    shape = x.shape

    def vjp(g: Array) -> Array:
        z = np.zeros(shape)
        z[:, start:stop] = g
        return z

    return _emit("slice_channels", x.data[:, start:stop].copy(), [(x, vjp)])


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Rows [start, stop) of a 2-D tensor."""
    _require_2d("slice_rows", x)
    if not (0 <= start <= stop <= x.shape[0]):
        raise DimensionError(f"slice_rows: [{start}, {stop}) outside length {x.shape[0]}")
    shape = x.shape

    def vjp(g: Array) -> Array:
        z = np.zeros(shape)
        z[start:stop, :] = g
        return z

    return _emit("slice_rows", x.data[start:stop, :].copy(), [(x, vjp)])


def transpose(x: Tensor) -> Tensor:
    _require_2d("transpose", x)
    return _emit("transpose", x.data.T.copy(), [(x, lambda g: g.T.copy())])


def take_flat(x: Tensor, indices: Array, out_shape: tuple[int, ...]) -> Tensor:
    """Gather flattened elements of ``x`` into ``out_shape``.

    ``indices`` holds positions into ``x`` flattened row-major; duplicate
    positions are allowed and accumulate in the gradient.
    """
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    flat = x.data.reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
        raise DimensionError(f"take_flat: index outside tensor of size {flat.size}")
    out = flat[idx].reshape(out_shape)
    shape = x.shape

    def vjp(g: Array) -> Array:
        z = np.zeros(shape).reshape(-1)
        np.add.at(z, idx, g.reshape(-1))
        return z.reshape(shape)

    return _emit("take_flat", out, [(x, vjp)])


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Select rows of a V-by-e table by index; gradients scatter-add back."""
    _require_2d("gather_rows", table)
    idx = np.asarray(list(ids), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather_rows: id outside table with {table.shape[0]} rows")
    out = table.data[idx, :].copy()
    shape = table.shape

    def vjp(g: Array) -> Array:
        z = np.zeros(shape)
        np.add.at(z, idx, g)
        return z

    return _emit("gather_rows", out, [(table, vjp)])


# ---------------------------------------------------------------------------
# normalization, softmax, loss


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization to zero mean / unit population variance, then
    affine scale-shift. Accepts a single row as a 1-D tensor."""
    squeeze = x.data.ndim == 1
    xd = x.data[None, :] if squeeze else x.data
    if xd.ndim != 2:
        raise DimensionError(f"layer_norm: expected 1-D or 2-D input, got {x.shape}")
    d = xd.shape[1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not fit width {d}")
    mu = xd.mean(axis=1, keepdims=True)
    var = xd.var(axis=1, keepdims=True)
    denom = var + eps
    if np.any(denom <= 0.0):
        raise ContractError("layer_norm: zero variance with eps=0")
    r = 1.0 / np.sqrt(denom)
    xhat = (xd - mu) * r
    out2 = xhat * gamma.data + beta.data
    out = out2[0] if squeeze else out2
    gd = gamma.data

    def vjp_x(g: Array) -> Array:
        g2 = g[None, :] if squeeze else g
        dxhat = g2 * gd
        dx = r * (dxhat
                  - dxhat.mean(axis=1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx[0] if squeeze else dx

    def vjp_gamma(g: Array) -> Array:
        g2 = g[None, :] if squeeze else g
        return (g2 * xhat).sum(axis=0)

    def vjp_beta(g: Array) -> Array:
        g2 = g[None, :] if squeeze else g
        return g2.sum(axis=0)

    return _emit("layer_norm", out, [(x, vjp_x), (gamma, vjp_gamma), (beta, vjp_beta)])


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction."""
    _require_2d("softmax_rows", x)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=1, keepdims=True)

    def vjp(g: Array) -> Array:
        return s * (g - (g * s).sum(axis=1, keepdims=True))

    return _emit("softmax_rows", s, [(x, vjp)])


def softmax_cross_entropy(logits: Tensor, targets: Sequence[int],
                          mask: Sequence[int]) -> Tensor:
    """Mean negative log-likelihood over the positions where mask is 1.

    ``logits`` is t-by-V; ``targets`` holds a class index per position and
    ``mask`` selects which positions contribute. Stabilized by row-max
    subtraction.
    """
    _require_2d("softmax_cross_entropy", logits)
    t, v = logits.shape
    tgt = np.asarray(list(targets), dtype=np.intp)
    msk = np.asarray(list(mask), dtype=np.float64)
    if tgt.shape != (t,):
        raise DimensionError(f"softmax_cross_entropy: {tgt.shape[0]} targets for {t} rows")
    if msk.shape != (t,):
        raise DimensionError(f"softmax_cross_entropy: mask length {msk.shape[0]} for {t} rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= v):
        raise IndexError(f"softmax_cross_entropy: target outside [0, {v})")
    active = msk > 0
    m = int(active.sum())
    if m == 0:
        raise EmptyReductionError("softmax_cross_entropy: every position is masked out")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1)) + logits.data.max(axis=1)
    nll = lse - logits.data[np.arange(t), tgt]
    loss = np.asarray(nll[active].mean())

    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    grad = p.copy()
    grad[np.arange(t), tgt] -= 1.0
    grad *= (active / m)[:, None]

    return _emit("softmax_cross_entropy", loss, [(logits, lambda g: float(g) * grad)])


# ---------------------------------------------------------------------------
# backward and verification


def backward(root: Tensor) -> None:
    """Populate ``root.tape.gradients`` for every node reachable from root.

    Accumulation is additive over fan-out and runs in reverse creation
    order, which is a valid reverse-topological order by construction.
    """
    if not root.tracked:
        raise ContractError("backward: root is not tape-tracked")
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar, got shape {root.shape}")
    tape = root.tape
    assert tape is not None
    acc: dict[int, Array] = {root.node_id: np.ones_like(root.data)}
    for nid in range(root.node_id, -1, -1):
        g = acc.get(nid)
        if g is None:
            continue
        node = tape.nodes[nid]
        for input_id, vjp in zip(node.input_ids, node.vjps):
            contrib = vjp(g)
            if input_id in acc:
                acc[input_id] = acc[input_id] + contrib
            else:
                acc[input_id] = contrib
    tape.gradients = {nid: Tensor(arr) for nid, arr in acc.items()}


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a finite-difference gradient comparison."""

    max_rel_error: float
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(f: Callable[[Tensor], Tensor], x, h: float = 1e-5,
               tol: float = 1e-4) -> GradCheckReport:
    """Compare backward() against central finite differences at ``x``.

    ``f`` must map a tensor to a scalar tensor and be evaluable at every
    coordinate perturbation x +- h*e_i. Relative error per coordinate is
    |a - n| / max(1e-8, |a| + |n|); the report carries the worst one.
    """
    x0 = _as_array(x.data if isinstance(x, Tensor) else x)
    tape = Tape()
    out = f(tape.leaf(x0))
    if not isinstance(out, Tensor) or out.size != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    backward(out)
    analytic = tape.gradients[0].data  # leaf was the first node

    numeric = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp = x0.copy()
        xp[idx] += h
        fp = f(Tensor(xp)).item()
        xm = x0.copy()
        xm[idx] -= h
        fm = f(Tensor(xm)).item()
        numeric[idx] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    rel = np.abs(analytic - numeric) / denom
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    worst_t = tuple(int(i) for i in worst)
    return GradCheckReport(
        max_rel_error=float(rel.max()) if rel.size else 0.0,
        worst_index=worst_t,
        analytic=float(analytic[worst_t]) if rel.size else 0.0,
        numeric=float(numeric[worst_t]) if rel.size else 0.0,
        tol=tol,
    )
