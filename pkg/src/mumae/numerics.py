"""Dense float64 arrays with a small reverse-mode autodiff tape.

Values are plain ``numpy.ndarray`` (float64). A :class:`Node` wraps a value
together with the parents and the closure that pushes gradients back to
them. Every forward pass records a fresh graph; nothing is retained between
passes.

Matrix products go through an ordered-accumulation kernel instead of BLAS so
that results are bit-identical to a textbook triple loop on every machine.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numba
import numpy as np

DTYPE = np.float64

STREAMS = {"data": 1, "mask": 2, "init": 3, "episode": 4, "shuffle": 5}


# ---------------------------------------------------------------------------
# Random streams
# ---------------------------------------------------------------------------


def _stream_id(name: str | int) -> int:
    if isinstance(name, int):
        return name
    if name in STREAMS:
        return STREAMS[name]
    return zlib.crc32(name.encode("utf-8"))


@dataclass(frozen=True)
class RngStream:
    """A named, counter-based random stream.

    ``generator(*key)`` returns a fresh Philox generator keyed by
    ``(seed, stream, *key)``; drawing from one key never shifts another.
    """

    seed: int
    stream: str | int = "data"

    def generator(self, *key: int) -> np.random.Generator:
        ss = np.random.SeedSequence(
            self.seed & 0xFFFFFFFFFFFFFFFF,
            spawn_key=(_stream_id(self.stream), *[int(k) for k in key]),
        )
        return np.random.Generator(np.random.Philox(ss))


# ---------------------------------------------------------------------------
# Ordered matmul kernel
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _mm2(a, b, out):
    m, k = a.shape
    n = b.shape[1]
    for i in range(m):
        for j in range(n):
            out[i, j] = 0.0
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]


@numba.njit(cache=True)
def _mm3(a, b, out):
    for s in range(a.shape[0]):
        _mm2(a[s], b[s], out[s])


def ordered_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``a @ b`` with strictly sequential accumulation over the inner index."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    m, k = a.shape[-2:]
    n = b.shape[-1]
    if b.ndim == 2:
        lead = a.shape[:-2]
        a2 = np.ascontiguousarray(a.reshape(-1, k))
        out = np.empty((a2.shape[0], n), dtype=DTYPE)
        _mm2(a2, np.ascontiguousarray(b), out)
        return out.reshape(*lead, m, n)
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    a3 = np.ascontiguousarray(np.broadcast_to(a, (*lead, m, k)).reshape(-1, m, k))
    b3 = np.ascontiguousarray(np.broadcast_to(b, (*lead, k, n)).reshape(-1, k, n))
    out = np.empty((a3.shape[0], m, n), dtype=DTYPE)
    _mm3(a3, b3, out)
    return out.reshape(*lead, m, n)


# ---------------------------------------------------------------------------
# Graph nodes
# ---------------------------------------------------------------------------


class Node:
    """A value in the recorded computation graph."""

    __slots__ = ("value", "grad", "parents", "op", "backward_fn", "requires_grad")

    def __init__(
        self,
        value,
        parents: Sequence["Node"] = (),
        op: str = "leaf",
        backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        requires_grad: bool | None = None,
    ):
        self.value = np.asarray(value, dtype=DTYPE)
        self.parents = tuple(parents)
        self.op = op
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Node(op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value, requires_grad: bool = True) -> Node:
    return Node(value, requires_grad=requires_grad)


def const(value) -> Node:
    return Node(value, requires_grad=False)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def backward(root: Node) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.value.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------------------
# Elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(
        a.value + b.value,
        (a, b),
        "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.shape, b.shape
    return Node(
        a.value - b.value,
        (a, b),
        "sub",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    return Node(
        av * bv,
        (a, b),
        "mul",
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = av / bv
    return Node(
        out,
        (a, b),
        "div",
        lambda g: (_unbroadcast(g / bv, av.shape), _unbroadcast(-g * out / bv, bv.shape)),
    )


def neg(a) -> Node:
    a = as_node(a)
    return Node(-a.value, (a,), "neg", lambda g: (-g,))


def exp(a) -> Node:
    a = as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), "exp", lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(np.log(av), (a,), "log", lambda g: (g / av,))


def sqrt(a) -> Node:
    a = as_node(a)
    out = np.sqrt(a.value)
    return Node(out, (a,), "sqrt", lambda g: (g * 0.5 / out,))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return Node(av * av, (a,), "square", lambda g: (2.0 * g * av,))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return Node(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a) -> Node:
    a = as_node(a)
    pos = a.value > 0
    return Node(np.where(pos, a.value, 0.0), (a,), "relu", lambda g: (g * pos,))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a) -> Node:
    """Tanh-approximated GELU."""
    a = as_node(a)
    x = a.value
    x2 = x * x
    t = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Node(out, (a,), "gelu", bw)


def sum(a, axis=None, keepdims: bool = False) -> Node:  # noqa: A001 - mirrors numpy
    a = as_node(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Node(a.value.sum(axis=axis, keepdims=keepdims), (a,), "sum", bw)


def mean(a, axis=None, keepdims: bool = False) -> Node:
    a = as_node(a)
    if axis is None:
        count = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Shape ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.shape
    return Node(a.value.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes) -> Node:
    a = as_node(a)
    inv = np.argsort(axes)
    return Node(np.transpose(a.value, axes), (a,), "transpose", lambda g: (np.transpose(g, inv),))


def swap_last(a) -> Node:
    a = as_node(a)
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def concat(items: Sequence, axis: int = 0) -> Node:
    nodes = [as_node(x) for x in items]
    if not nodes:
        raise ValueError("concat of an empty list")
    sizes = [n.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return Node(
        np.concatenate([n.value for n in nodes], axis=axis),
        nodes,
        "concat",
        lambda g: np.split(g, cuts, axis=axis),
    )


def take(a, indices, axis: int = 0) -> Node:
    """Select entries along one axis with a fixed index array."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    ax = axis % a.ndim

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        sl = [slice(None)] * len(shape)
        sl[ax] = idx
        np.add.at(out, tuple(sl), g)
        return (out,)

    return Node(np.take(a.value, idx, axis=ax), (a,), "take", bw)


def gather_rows(a, indices) -> Node:
    """Per-batch row selection: ``a[b, indices[b]]`` for ``a`` of shape [B, L, ...]."""
    a = as_node(a)
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape
    bidx = np.arange(shape[0])[:, None]

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, (bidx, idx), g)
        return (out,)

    return Node(a.value[bidx, idx], (a,), "gather_rows", bw)


def unfold(a, window: int, stride: int) -> Node:
    """Sliding windows over axis -2: [..., T, C] -> [..., T', window*C]."""
    a = as_node(a)
    T, C = a.shape[-2:]
    if T < window:
        raise ValueError(f"sequence length {T} shorter than window {window}")
    n_out = (T - window) // stride + 1
    idx = np.arange(n_out)[:, None] * stride + np.arange(window)[None, :]
    lead = a.shape[:-2]
    shape = a.shape
    win = a.value[..., idx, :]  # [..., T', w, C]

    def bw(g):
        g = g.reshape(*lead, n_out, window, C)
        out = np.zeros(shape, dtype=DTYPE)
        if stride >= window:
            out[..., idx.reshape(-1), :] += g.reshape(*lead, n_out * window, C)
        else:
            for j in range(window):
                out[..., idx[:, j], :] += g[..., :, j, :]
        return (out,)

    return Node(win.reshape(*lead, n_out, window * C), (a,), "unfold", bw)


# ---------------------------------------------------------------------------
# Linear algebra and fused ops
# ---------------------------------------------------------------------------


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    out = ordered_matmul(av, bv)

    # Gradients use BLAS: still bit-reproducible on one machine, and only the
    # forward product is promised to match the sequential triple loop.
    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bv, -1, -2)), av.shape)
        if b.requires_grad:
            if bv.ndim == 2 and av.ndim > 2:
                k = av.shape[-1]
                gb = av.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(av, -1, -2), g), bv.shape)
        return ga, gb

    return Node(out, (a, b), "matmul", bw)


def linear(x, weight, bias=None) -> Node:
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


def softmax_value(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_backward(g: np.ndarray, out: np.ndarray, axis: int) -> np.ndarray:
    return out * (g - (g * out).sum(axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Node:
    a = as_node(a)
    out = softmax_value(a.value, axis)
    return Node(out, (a,), "softmax", lambda g: (_softmax_backward(g, out, axis),))


def layer_norm_value(x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Node:
    """Normalize over the last axis, then apply an optional affine map."""
    a = as_node(a)
    x = a.value
    n = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = g * xhat
        return (inv * (g - gm - xhat * gx.sum(axis=-1, keepdims=True) / n),)

    y = Node(xhat, (a,), "layer_norm", bw)
    if gain is not None:
        y = mul(y, gain)
    if bias is not None:
        y = add(y, bias)
    return y


def conv1d(x, kernels, stride: int = 1, bias=None) -> Node:
    """Valid cross-correlation of ``x`` [..., T, Cin] with ``kernels`` [w, Cin, Cout]."""
    x, kernels = as_node(x), as_node(kernels)
    w, cin, cout = kernels.shape
    if x.shape[-1] != cin:
        raise ValueError(f"conv1d channel mismatch: input {x.shape}, kernels {kernels.shape}")
    if x.shape[-2] < w:
        raise ValueError(f"conv1d input length {x.shape[-2]} shorter than kernel width {w}")
    cols = unfold(x, w, stride)
    return linear(cols, reshape(kernels, (w * cin, cout)), bias)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    worst: str = ""
    per_input: dict[str, float] = field(default_factory=dict)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[dict[str, Node]], Node],
    point: Mapping[str, np.ndarray],
    step: float = 1e-4,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients of scalar ``f`` against central differences.

    Uses the five-point stencil (f(x-2h), f(x-h), f(x+h), f(x+2h)).

    ``f`` receives a dict of leaf nodes keyed like ``point``. Failures are
    reported through ``passed``; nothing is raised.
    """
    base = {k: np.array(v, dtype=DTYPE) for k, v in point.items()}
    leaves = {k: leaf(v) for k, v in base.items()}
    backward(f(leaves))
    analytic = {
        k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in leaves.items()
    }

    def evaluate(values: dict[str, np.ndarray]) -> float:
        return float(f({k: const(v) for k, v in values.items()}).value)

    per_input: dict[str, float] = {}
    worst_err, worst_name = 0.0, ""
    for name, arr in base.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            fv = []
            for k in (2, 1, -1, -2):
                flat[i] = orig + k * step
                fv.append(evaluate(base))
            flat[i] = orig
            # Fourth-order central stencil: truncation error O(step^4).
            # Differences first so an input that does not affect f gives exactly 0.
            nflat[i] = (8.0 * (fv[1] - fv[2]) - (fv[0] - fv[3])) / (12.0 * step)
        err = float(relative_error(analytic[name], numeric, floor).max(initial=0.0))
        per_input[name] = err
        if err >= worst_err:
            worst_err, worst_name = err, name
    return GradCheckReport(worst_err, worst_err < tolerance, worst_name, per_input)


def param_leaves(params: Mapping[str, np.ndarray], names: Iterable[str] | None = None) -> dict[str, Node]:
    """Wrap a parameter dict as trainable leaves for one forward pass."""
    keys = params.keys() if names is None else names
    return {k: leaf(params[k]) for k in keys}


def collect_grads(leaves: Mapping[str, Node]) -> dict[str, np.ndarray]:
    return {
        k: (n.grad if n.grad is not None else np.zeros_like(n.value)) for k, n in leaves.items()
    }
