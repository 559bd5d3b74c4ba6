"""Float64 tensors with reverse-mode automatic differentiation.

Each op returns a new :class:`Tensor` that remembers its parents and a closure
mapping the output gradient to one gradient per parent.  :func:`backward`
walks the graph in reverse topological order and accumulates into the
``grad`` slot of leaf tensors created with ``requires_grad=True``.

Binary ops broadcast numpy-style: shapes are aligned on trailing axes and
axes of size 1 expand.  Gradients of broadcast operands are summed back to
the operand's shape.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


_local = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "decay", "_parents", "_backward")
    __array_ufunc__ = None  # ndarray <op> Tensor dispatches to the reflected Tensor method

    def __init__(self, data, requires_grad: bool = False, decay: bool = False):
        self.data = np.array(data, dtype=np.float64)
        _check_finite(self.data, "tensor")
        self.requires_grad = requires_grad
        self.grad = None
        self.op = "leaf"
        self.decay = decay
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"expected a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple, backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out.decay = False
    out.requires_grad = is_grad_enabled() and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Tensors reachable from an output, parents before children."""

    nodes: list

    @classmethod
    def trace(cls, output: Tensor) -> "Graph":
        order, seen = [], set()
        stack = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def entries(self):
        """Yield ``(op, input node indices, tensor)`` in topological order."""
        index = {id(n): i for i, n in enumerate(self.nodes)}
        for node in self.nodes:
            yield node.op, [index[id(p)] for p in node._parents if id(p) in index], node


def backward(loss: Tensor, graph: Graph | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = graph or Graph.trace(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _check_finite(g, "backward")
            node.grad = np.array(g) if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), bw, "div")


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * factor, (x,), lambda g: (g * factor,), "scale")


def power(x, exponent: float) -> Tensor:
    x = as_tensor(x)

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return _result(x.data ** exponent, (x,), bw, "pow")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid(x.data)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def clip(x, lo: float, hi: float) -> Tensor:
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _result(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clip")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "relu": relu,
    "scale": scale,
}


def elementwise(op: str, x, y=None) -> Tensor:
    """Dispatch by name; ``scale`` takes a python float as ``y``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    if op in ("sigmoid", "tanh", "relu"):
        return fn(x)
    return fn(x, y)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(a.data @ b.data, (a, b), bw, "matmul")


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))
    return _result(out, (x,), lambda g: (_expand_reduced(g, x.shape, axis, keepdims),), "sum")


def mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))
    n = x.size / max(out.size, 1)
    return _result(out, (x,), lambda g: (_expand_reduced(g / n, x.shape, axis, keepdims),), "mean")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    return _result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(a % x.ndim for a in axes)
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(i is None or i is Ellipsis or isinstance(i, (int, np.integer, slice)) for i in items)


def getitem(x, index) -> Tensor:
    x = as_tensor(x)
    out = np.array(x.data[index])
    basic = _is_basic_index(index)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _result(out, (x,), bw, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat: empty tensor list")
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _result(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), bw, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("stack: empty tensor list")
    ts = [as_tensor(t) for t in tensors]
    if any(t.shape != ts[0].shape for t in ts):
        raise DimensionError(f"stack: mismatched shapes {[t.shape for t in ts]}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def bw(g):
        moved = np.moveaxis(g, ax, 0)
        return tuple(moved[i] for i in range(len(ts)))

    return _result(out, tuple(ts), bw, "stack")


def pad(x, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad one axis."""
    x = as_tensor(x)
    ax = axis % x.ndim
    widths = [(0, 0)] * x.ndim
    widths[ax] = (before, after)
    n = x.shape[ax]

    def bw(g):
        sl = [slice(None)] * x.ndim
        sl[ax] = slice(before, before + n)
        return (g[tuple(sl)],)

    return _result(np.pad(x.data, widths), (x,), bw, "pad")


# ---------------------------------------------------------------------------
# fused ops


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.shape[axis] < 1:
        raise DimensionError("softmax: empty axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bw, "softmax")


def softmax_last_axis(x) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _result(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


def gru_cell(gx, h, w_hh, b_hh) -> Tensor:
    """One GRU step on ``[B, .]`` tensors, gate blocks ordered (r, z, n).

    ``gx`` is the precomputed input projection ``x W_ih + b_ih``.  The
    candidate uses ``n = tanh(gx_n + r * (h W_hn + b_hn))`` and the update is
    ``h' = (1 - z) * n + z * h``.
    """
    gx, h, w_hh, b_hh = (as_tensor(t) for t in (gx, h, w_hh, b_hh))
    H = h.shape[-1]
    if gx.shape[-1] != 3 * H or w_hh.shape != (H, 3 * H):
        raise DimensionError(f"gru_cell: gx {gx.shape}, h {h.shape}, w_hh {w_hh.shape}")
    gh = h.data @ w_hh.data + b_hh.data
    r = _sigmoid(gx.data[..., :H] + gh[..., :H])
    z = _sigmoid(gx.data[..., H:2 * H] + gh[..., H:2 * H])
    ghn = gh[..., 2 * H:]
    n = np.tanh(gx.data[..., 2 * H:] + r * ghn)
    out = (1.0 - z) * n + z * h.data

    def bw(g):
        dn = g * (1.0 - z) * (1.0 - n * n)
        dz = g * (h.data - n) * z * (1.0 - z)
        dr = dn * ghn * r * (1.0 - r)
        dgx = np.concatenate([dr, dz, dn], axis=-1)
        dgh = np.concatenate([dr, dz, dn * r], axis=-1)
        dh = g * z + dgh @ w_hh.data.T
        return dgx, dh, h.data.T @ dgh, dgh.sum(axis=0)

    return _result(out, (gx, h, w_hh, b_hh), bw, "gru_cell")


def lstm_cell(gx, h, c, w_hh) -> Tensor:
    """One LSTM step; returns ``concat([h', c'], -1)``.

    Gate blocks of ``gx + h W_hh`` are ordered (i, f, g, o):
    ``c' = f * c + i * g`` and ``h' = o * tanh(c')``.
    """
    gx, h, c, w_hh = (as_tensor(t) for t in (gx, h, c, w_hh))
    H = h.shape[-1]
    if gx.shape[-1] != 4 * H or c.shape != h.shape or w_hh.shape != (H, 4 * H):
        raise DimensionError(f"lstm_cell: gx {gx.shape}, h {h.shape}, c {c.shape}, w_hh {w_hh.shape}")
    pre = gx.data + h.data @ w_hh.data
    i = _sigmoid(pre[..., :H])
    f = _sigmoid(pre[..., H:2 * H])
    gg = np.tanh(pre[..., 2 * H:3 * H])
    o = _sigmoid(pre[..., 3 * H:])
    c_new = f * c.data + i * gg
    tc = np.tanh(c_new)
    h_new = o * tc

    def bw(g):
        dh_new, dc_ext = g[..., :H], g[..., H:]
        dc = dc_ext + dh_new * o * (1.0 - tc * tc)
        dpre = np.concatenate(
            [
                dc * gg * i * (1.0 - i),
                dc * c.data * f * (1.0 - f),
                dc * i * (1.0 - gg * gg),
                dh_new * tc * o * (1.0 - o),
            ],
            axis=-1,
        )
        return dpre, dpre @ w_hh.data.T, dc * f, h.data.T @ dpre

    return _result(np.concatenate([h_new, c_new], axis=-1), (gx, h, c, w_hh), bw, "lstm_cell")


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between backprop and central differences.

    Error per entry is ``|analytic - numeric| / max(1, |numeric|)``.  ``f``
    must be deterministic.  ``max_entries`` caps the number of entries probed
    per tensor (sampled with ``rng``); by default every entry is checked.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    for p in params:
        p.grad = None
    backward(f())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + eps
                fp = f().item()
                flat[i] = orig - eps
                fm = f().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * eps)
            worst = max(worst, abs(analytic.flat[i] - numeric) / max(1.0, abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# random numbers


class Rng:
    """Seeded PCG64 stream (numpy's documented, platform-independent generator)."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def uniform(self, low: float, high: float, shape) -> np.ndarray:
        return self.gen.uniform(low, high, shape)

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return self.gen.normal(0.0, scale, shape)

    def random(self, shape) -> np.ndarray:
        return self.gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def spawn(self, n: int) -> list["Rng"]:
        """Independent child streams, deterministic given the parent seed."""
        children = []
        for child in self._seq.spawn(n):
            r = Rng.__new__(Rng)
            r.seed = self.seed
            r._seq = child
            r.gen = np.random.Generator(np.random.PCG64(child))
            children.append(r)
        return children
