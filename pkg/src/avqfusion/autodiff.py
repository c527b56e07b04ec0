"""Dense 2-D linear algebra with exact reverse-mode gradients.

All numeric state lives in row-major float64 matrices. Operations append
nodes to a :class:`Tape`; the tape is rebuilt on every forward pass and
swept once in reverse to produce gradients. Nothing is cached between
passes, so replaying a forward with the same inputs and RNG state is
bit-reproducible.

The fused :func:`multihead_attention` primitive covers the scaled
dot-product core (per-head softmax(QK^T/sqrt(dk)) V over row segments);
projections, biases and head concatenation are expressed with the plain
primitives around it.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
from scipy.special import erf

from .errors import ConfigError, ShapeError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _as_matrix(value) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


class Node:
    """One tape entry: a value plus the recipe to push gradients back."""

    __slots__ = ("tape", "value", "grad", "requires_grad", "name", "_parents", "_vjp", "_idx")

    def __init__(self, tape, value, requires_grad, parents=(), vjp=None, name=None):
        self.tape = tape
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Node, ...] = parents
        self._vjp: Optional[Callable[[np.ndarray], tuple[np.ndarray, ...]]] = vjp
        self._idx = tape._register(self)

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self):  # pragma: no cover - debugging aid
        tag = self.name or "node"
        return f"<Node {tag} {self.value.shape}>"


class Tape:
    """Append-only record of primitive applications.

    Creation order is a topological order, so the reverse sweep simply
    walks the node list backwards. A tape is single-owner: one forward
    build followed by one backward sweep.
    """

    def __init__(self):
        self._nodes: list[Node] = []

    def _register(self, node: Node) -> int:
        self._nodes.append(node)
        return len(self._nodes) - 1

    def leaf(self, value, name=None) -> Node:
        """Trainable leaf; receives a gradient on backward()."""
        return Node(self, _as_matrix(value).copy(), requires_grad=True, name=name)

    def constant(self, value, name=None) -> Node:
        """Non-trainable input; backward never propagates into it."""
        return Node(self, _as_matrix(value), requires_grad=False, name=name)

    def __len__(self):
        return len(self._nodes)


def backward(loss: Node) -> None:
    """Reverse sweep from a scalar loss.

    Fills ``node.grad`` for every node that requires a gradient; leaves
    created on the tape but not reachable from the loss get zeros.
    """
    if loss.value.shape != (1, 1):
        raise ShapeError(f"loss must be 1x1, got {loss.value.shape}")
    tape = loss.tape
    grads: list[Optional[np.ndarray]] = [None] * len(tape._nodes)
    # A vjp may hand the same array to several parents (e.g. add), so a
    # first contribution is stored by reference and only summed out-of-place;
    # `owned` marks freshly allocated accumulators that may be updated in place.
    owned = [False] * len(tape._nodes)
    grads[loss._idx] = np.ones((1, 1))
    owned[loss._idx] = True
    for idx in range(loss._idx, -1, -1):
        node = tape._nodes[idx]
        g = grads[idx]
        if g is None or not node.requires_grad:
            continue
        node.grad = g
        if node._vjp is None:
            continue
        for parent, contrib in zip(node._parents, node._vjp(g)):
            if contrib is None or not parent.requires_grad:
                continue
            pidx = parent._idx
            if grads[pidx] is None:
                grads[pidx] = contrib
            elif owned[pidx]:
                grads[pidx] += contrib
            else:
                grads[pidx] = grads[pidx] + contrib
                owned[pidx] = True
    for node in tape._nodes:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.value)


def _unary(a: Node, value: np.ndarray, vjp, name: str) -> Node:
    return Node(a.tape, value, a.requires_grad, (a,), vjp, name)


def _binary(a: Node, b: Node, value: np.ndarray, vjp, name: str) -> Node:
    if a.tape is not b.tape:
        raise ConfigError("operands live on different tapes")
    rg = a.requires_grad or b.requires_grad
    return Node(a.tape, value, rg, (a, b), vjp, name)


def _require_same_shape(a: Node, b: Node, op: str) -> None:
    if a.value.shape != b.value.shape:
        raise ShapeError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def matmul(a: Node, b: Node) -> Node:
    """Matrix product; d a = g b^T, d b = a^T g."""
    if a.cols != b.rows:
        raise ShapeError(
            f"matmul: inner dimensions disagree for {a.value.shape} x {b.value.shape}"
        )
    out = a.value @ b.value

    def vjp(g):
        return g @ b.value.T, a.value.T @ g

    return _binary(a, b, out, vjp, "matmul")


def transpose(a: Node) -> Node:
    return _unary(a, np.ascontiguousarray(a.value.T), lambda g: (np.ascontiguousarray(g.T),), "transpose")


def add(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "add")
    return _binary(a, b, a.value + b.value, lambda g: (g, g), "add")


def sub(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "sub")
    return _binary(a, b, a.value - b.value, lambda g: (g, -g), "sub")


def mul(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "mul")
    return _binary(a, b, a.value * b.value, lambda g: (g * b.value, g * a.value), "mul")


def div(a: Node, b: Node) -> Node:
    _require_same_shape(a, b, "div")
    out = a.value / b.value

    def vjp(g):
        return g / b.value, -g * a.value / (b.value * b.value)

    return _binary(a, b, out, vjp, "div")


def add_bias(a: Node, b: Node) -> Node:
    """Add a 1 x d bias row to every row of an n x d matrix."""
    if b.rows != 1 or b.cols != a.cols:
        raise ShapeError(f"add_bias: bias {b.value.shape} does not match matrix {a.value.shape}")
    return _binary(a, b, a.value + b.value, lambda g: (g, g.sum(axis=0, keepdims=True)), "add_bias")


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _unary(a, a.value * c, lambda g: (g * c,), "scale")


def add_scalar(a: Node, c: float) -> Node:
    c = float(c)
    return _unary(a, a.value + c, lambda g: (g,), "add_scalar")


def square(a: Node) -> Node:
    return _unary(a, a.value * a.value, lambda g: (2.0 * g * a.value,), "square")


def sqrt(a: Node) -> Node:
    out = np.sqrt(a.value)
    return _unary(a, out, lambda g: (g * 0.5 / out,), "sqrt")


def sum_all(a: Node) -> Node:
    out = np.array([[a.value.sum()]])
    return _unary(a, out, lambda g: (np.full_like(a.value, g[0, 0]),), "sum_all")


def mean_all(a: Node) -> Node:
    n = a.value.size
    out = np.array([[a.value.mean()]])
    return _unary(a, out, lambda g: (np.full_like(a.value, g[0, 0] / n),), "mean_all")


def segment_mean(a: Node, seg_len: int) -> Node:
    """Mean-pool consecutive row blocks of length seg_len: (B*N) x d -> B x d."""
    if seg_len < 1 or a.rows % seg_len:
        raise ShapeError(f"segment_mean: {a.rows} rows not divisible into segments of {seg_len}")
    n_seg = a.rows // seg_len
    out = a.value.reshape(n_seg, seg_len, a.cols).mean(axis=1)

    def vjp(g):
        return (np.repeat(g / seg_len, seg_len, axis=0),)

    return _unary(a, out, vjp, "segment_mean")


def concat_cols(a: Node, b: Node) -> Node:
    if a.rows != b.rows:
        raise ShapeError(f"concat_cols: row counts {a.rows} and {b.rows} differ")
    out = np.concatenate([a.value, b.value], axis=1)
    ca = a.cols

    def vjp(g):
        return np.ascontiguousarray(g[:, :ca]), np.ascontiguousarray(g[:, ca:])

    return _binary(a, b, out, vjp, "concat_cols")


def slice_cols(a: Node, j0: int, j1: int) -> Node:
    if not (0 <= j0 < j1 <= a.cols):
        raise ShapeError(f"slice_cols: [{j0}, {j1}) out of range for {a.cols} columns")
    out = np.ascontiguousarray(a.value[:, j0:j1])

    def vjp(g):
        full = np.zeros_like(a.value)
        full[:, j0:j1] = g
        return (full,)

    return _unary(a, out, vjp, "slice_cols")


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_rows(a: Node) -> Node:
    """Row-wise softmax, stabilized by row-max subtraction."""
    out = _softmax_rows(a.value)

    def vjp(g):
        dot = (g * out).sum(axis=-1, keepdims=True)
        return (out * (g - dot),)

    return _unary(a, out, vjp, "softmax_rows")


def gelu_value(x: np.ndarray) -> np.ndarray:
    """x * Phi(x) with the exact Gaussian CDF (no tanh approximation)."""
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad_value(x: np.ndarray) -> np.ndarray:
    """d/dx gelu = Phi(x) + x * phi(x)."""
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi


def gelu(a: Node) -> Node:
    return _unary(a, gelu_value(a.value), lambda g: (g * gelu_grad_value(a.value),), "gelu")


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)
    return _unary(a, out, lambda g: (g * (1.0 - out * out),), "tanh")


def dropout(a: Node, rate: float, mode: str, rng: Optional[np.random.Generator] = None) -> Node:
    """Inverted dropout: train mode zeroes entries w.p. rate and rescales
    survivors by 1/(1-rate); eval mode is the identity."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return a
    if rng is None:
        raise ConfigError("train-mode dropout needs an explicit rng")
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return _unary(a, a.value * keep, lambda g: (g * keep,), "dropout")


def multihead_attention(q: Node, k: Node, v: Node, n_heads: int, seg_len: int) -> Node:
    """Per-segment multi-head scaled dot-product attention.

    q, k, v are (B*N) x d stacks of B independent segments of N rows; heads
    are contiguous column blocks of width d / n_heads. For each segment and
    head: softmax(Q K^T / sqrt(dk)) V. Output keeps the (B*N) x d layout,
    heads re-concatenated along columns.
    """
    _require_same_shape(q, k, "multihead_attention(q, k)")
    _require_same_shape(q, v, "multihead_attention(q, v)")
    rows, d = q.value.shape
    if n_heads < 1 or d % n_heads:
        raise ConfigError(f"n_heads={n_heads} must divide model width {d}")
    if seg_len < 1 or rows % seg_len:
        raise ShapeError(f"{rows} rows not divisible into segments of {seg_len}")
    n_seg = rows // seg_len
    dk = d // n_heads
    inv_scale = 1.0 / math.sqrt(dk)

    def heads(x: np.ndarray) -> np.ndarray:
        # (B*N) x d -> (B, H, N, dk)
        return x.reshape(n_seg, seg_len, n_heads, dk).transpose(0, 2, 1, 3)

    def unheads(x: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(x.transpose(0, 2, 1, 3).reshape(rows, d))

    qh, kh, vh = heads(q.value), heads(k.value), heads(v.value)
    scores = np.einsum("shnd,shmd->shnm", qh, kh) * inv_scale
    attn = _softmax_rows(scores)
    out = unheads(np.einsum("shnm,shmd->shnd", attn, vh))

    def vjp(g):
        gh = heads(g)
        d_attn = np.einsum("shnd,shmd->shnm", gh, vh)
        d_vh = np.einsum("shnm,shnd->shmd", attn, gh)
        dot = (d_attn * attn).sum(axis=-1, keepdims=True)
        d_scores = attn * (d_attn - dot) * inv_scale
        d_qh = np.einsum("shnm,shmd->shnd", d_scores, kh)
        d_kh = np.einsum("shnm,shnd->shmd", d_scores, qh)
        return unheads(d_qh), unheads(d_kh), unheads(d_vh)

    if q.tape is not k.tape or q.tape is not v.tape:
        raise ConfigError("operands live on different tapes")
    rg = q.requires_grad or k.requires_grad or v.requires_grad
    return Node(q.tape, out, rg, (q, k, v), vjp, "multihead_attention")


def attention_weights(q: np.ndarray, k: np.ndarray, n_heads: int, seg_len: int) -> np.ndarray:
    """Softmax attention weights as a (segments, heads, N, N) array.

    Value-level companion to :func:`multihead_attention` for inspection;
    not part of any gradient path.
    """
    q = _as_matrix(q)
    k = _as_matrix(k)
    rows, d = q.shape
    n_seg = rows // seg_len
    dk = d // n_heads
    qh = q.reshape(n_seg, seg_len, n_heads, dk).transpose(0, 2, 1, 3)
    kh = k.reshape(n_seg, seg_len, n_heads, dk).transpose(0, 2, 1, 3)
    scores = np.einsum("shnd,shmd->shnm", qh, kh) / math.sqrt(dk)
    return _softmax_rows(scores)
