"""Neural building blocks: conv embedding, positional encoding, attention
(temporal and cross-modal), layer norm, dropout, GRU, LSTM and linear maps.

Sequence tensors are laid out ``[..., T, d]``.  Parameters are initialised
uniformly in ``(-1/sqrt(fan_in), 1/sqrt(fan_in))`` from a seeded :class:`Rng`.
"""
from __future__ import annotations

import math

import numpy as np

from .tensor import (
    DimensionError,
    Rng,
    Tensor,
    as_tensor,
    concat,
    gru_cell,
    layer_norm as _layer_norm,
    lstm_cell,
    pad,
    relu,
    softmax,
    stack,
)


def uniform_param(rng: Rng, shape, fan_in: int, decay: bool = True) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True, decay=decay)


class Module:
    """Parameter container; attributes that are tensors, modules or lists of
    modules are discovered in assignment order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise KeyError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected {p.shape}, got {value.shape}")
            p.data[...] = value


def _check_last(x: Tensor, dim: int, what: str) -> None:
    if x.ndim < 1 or x.shape[-1] != dim:
        raise DimensionError(f"{what}: expected last dim {dim}, got shape {x.shape}")


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: Rng):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.weight = uniform_param(rng, (in_dim, out_dim), in_dim)
        self.bias = uniform_param(rng, (out_dim,), in_dim, decay=False)

    def forward(self, x):
        x = as_tensor(x)
        _check_last(x, self.in_dim, "linear")
        if x.ndim == 1:
            return (x.reshape(1, -1) @ self.weight).reshape(-1) + self.bias
        return x @ self.weight + self.bias


def linear(x, weight, bias) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 1:
        return (x.reshape(1, -1) @ weight).reshape(-1) + bias
    return x @ weight + bias


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.dim, self.eps = dim, eps
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def forward(self, x):
        x = as_tensor(x)
        _check_last(x, self.dim, "layer_norm")
        return _layer_norm(x, self.gain, self.bias, self.eps)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    return _layer_norm(x, gain, bias, eps)


def dropout(x, p: float, training: bool, rng: Rng | None) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-p)`` at train time."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * Tensor(keep)


class Dropout(Module):
    def __init__(self, p: float, rng: Rng):
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng

    def forward(self, x):
        return dropout(x, self.p, self.training, self.rng)


class Conv1dStack(Module):
    """Same-padded temporal convolutions with ReLU between layers.

    Layer ``l`` computes ``y[t] = sum_j x[t + j - k//2] @ W[j] + b`` with
    zeros outside the sequence.
    """

    def __init__(self, in_dim: int, out_dim: int, rng: Rng, num_layers: int = 5, kernel_size: int = 3):
        if num_layers < 1 or kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError("num_layers >= 1 and an odd kernel_size are required")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.num_layers, self.kernel_size = num_layers, kernel_size
        self.weights, self.biases = [], []
        dims = [in_dim] + [out_dim] * num_layers
        for l in range(num_layers):
            fan_in = kernel_size * dims[l]
            self.weights.append(uniform_param(rng, (kernel_size, dims[l], out_dim), fan_in))
            self.biases.append(uniform_param(rng, (out_dim,), fan_in, decay=False))

    def named_parameters(self, prefix: str = ""):
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            yield f"{prefix}weights.{l}", w
            yield f"{prefix}biases.{l}", b

    def forward(self, x):
        x = as_tensor(x)
        _check_last(x, self.in_dim, "conv_embed")
        if x.ndim < 2 or x.shape[-2] < 1:
            raise DimensionError(f"conv_embed: expected [..., T, d] with T >= 1, got {x.shape}")
        T, k, half = x.shape[-2], self.kernel_size, self.kernel_size // 2
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            xp = pad(x, -2, half, half)
            cols = concat([xp[..., j:j + T, :] for j in range(k)], axis=-1)
            x = cols @ w.reshape(k * w.shape[1], self.out_dim) + b
            if l < self.num_layers - 1:
                x = relu(x)
        return x


def conv_embed(x, stack_: Conv1dStack) -> Tensor:
    return stack_(x)


def positional_encode(T: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: even dims ``sin(t / 10000^(2i/d))``, odd dims ``cos``."""
    pos = np.arange(T, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    table = np.zeros((T, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


class PositionalEncoding:
    def __init__(self, max_len: int, d_model: int):
        self.max_len, self.d_model = max_len, d_model
        self.table = positional_encode(max_len, d_model)

    def __call__(self, T: int) -> np.ndarray:
        if T > self.max_len:
            raise DimensionError(f"sequence length {T} exceeds max_len {self.max_len}")
        return self.table[:T]


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, L, d = x.shape
    return x.reshape(*lead, L, heads, d // heads).swapaxes(-2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dk = x.shape
    return x.swapaxes(-2, -3).reshape(*lead, L, h * dk)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, heads: int):
    """Per-head ``softmax(q k^T / sqrt(d_k)) v`` on already-projected inputs."""
    dk = q.shape[-1] // heads
    Q, K, V = (_split_heads(t, heads) for t in (q, k, v))
    weights = softmax((Q @ K.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk)))
    return _merge_heads(weights @ V), weights


class MultiHeadAttention(Module):
    def __init__(self, d_model: int, num_heads: int, rng: Rng):
        if num_heads < 1 or d_model % num_heads:
            raise ValueError(f"num_heads={num_heads} must divide d_model={d_model}")
        self.d_model, self.num_heads = d_model, num_heads
        self.d_k = d_model // num_heads
        for name in ("q", "k", "v", "o"):
            setattr(self, f"w_{name}", uniform_param(rng, (d_model, d_model), d_model))
            setattr(self, f"b_{name}", uniform_param(rng, (d_model,), d_model, decay=False))

    def forward(self, q, k, v):
        """Return ``(output [..., L, d], weights [..., h, L, S])``."""
        q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
        for t in (q, k, v):
            _check_last(t, self.d_model, "attention")
            if t.ndim < 2 or t.shape[-2] < 1:
                raise DimensionError(f"attention: expected [..., L, d] with L >= 1, got {t.shape}")
        ctx, weights = scaled_dot_attention(
            q @ self.w_q + self.b_q, k @ self.w_k + self.b_k, v @ self.w_v + self.b_v, self.num_heads
        )
        return ctx @ self.w_o + self.b_o, weights


def attention(q, k, v, mha: MultiHeadAttention):
    return mha(q, k, v)


def tma(x_m, mha: MultiHeadAttention, return_weights: bool = False):
    """Self-attention of one modality along its time axis."""
    out, weights = mha(x_m, x_m, x_m)
    return (out, weights) if return_weights else out


class ModalityAttention(Module):
    """Attention across the modality axis with per-modality Q/K/V projections.

    Input ``[..., M, d]`` holds the M modality vectors at one timestep (the
    leading axes can carry batch and time).  Row ``m`` is projected by its own
    ``W^Q_m, W^K_m, W^V_m``; heads attend over the M rows and a single shared
    output projection maps the result back to ``d``.
    """

    def __init__(self, num_modalities: int, d_model: int, num_heads: int, rng: Rng):
        if num_heads < 1 or d_model % num_heads:
            raise ValueError(f"num_heads={num_heads} must divide d_model={d_model}")
        self.num_modalities, self.d_model, self.num_heads = num_modalities, d_model, num_heads
        M = num_modalities
        for name in ("q", "k", "v"):
            setattr(self, f"w_{name}", uniform_param(rng, (M, d_model, d_model), d_model))
            setattr(self, f"b_{name}", uniform_param(rng, (M, d_model), d_model, decay=False))
        self.w_o = uniform_param(rng, (d_model, d_model), d_model)
        self.b_o = uniform_param(rng, (d_model,), d_model, decay=False)

    def _project(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        *lead, M, d = x.shape
        return (x.reshape(*lead, M, 1, d) @ w).reshape(*lead, M, d) + b

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim < 2 or x.shape[-2] != self.num_modalities:
            raise DimensionError(f"mma: expected [..., {self.num_modalities}, d], got {x.shape}")
        _check_last(x, self.d_model, "mma")
        ctx, weights = scaled_dot_attention(
            self._project(x, self.w_q, self.b_q),
            self._project(x, self.w_k, self.b_k),
            self._project(x, self.w_v, self.b_v),
            self.num_heads,
        )
        return ctx @ self.w_o + self.b_o, weights


def mma(x_all_t, module: ModalityAttention, return_weights: bool = False):
    out, weights = module(x_all_t)
    return (out, weights) if return_weights else out


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected [T, d] or [B, T, d], got {x.shape}")
    return x, False


class GruLayer(Module):
    """Single GRU layer, optionally bidirectional (outputs concatenated
    forward then backward along the feature axis)."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: Rng, bidirectional: bool = True):
        self.input_dim, self.hidden_dim, self.bidirectional = input_dim, hidden_dim, bidirectional
        H = hidden_dim
        self.directions = []
        for _ in range(2 if bidirectional else 1):
            d = Module()
            d.w_ih = uniform_param(rng, (input_dim, 3 * H), input_dim)
            d.w_hh = uniform_param(rng, (H, 3 * H), H)
            d.b_ih = uniform_param(rng, (3 * H,), H, decay=False)
            d.b_hh = uniform_param(rng, (3 * H,), H, decay=False)
            self.directions.append(d)

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * len(self.directions)

    def _run(self, x: Tensor, d: Module, h: Tensor, reverse: bool) -> Tensor:
        T = x.shape[1]
        gx = x @ d.w_ih + d.b_ih
        outs = [None] * T
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            h = gru_cell(gx[:, t], h, d.w_hh, d.b_hh)
            outs[t] = h
        return stack(outs, axis=1)

    def forward(self, x, h0=None):
        x, squeeze = _as_batch(as_tensor(x))
        _check_last(x, self.input_dim, "gru")
        B = x.shape[0]
        zeros = np.zeros((B, self.hidden_dim))
        h0 = Tensor(zeros) if h0 is None else as_tensor(h0) + zeros
        outs = [self._run(x, d, h0, reverse=i == 1) for i, d in enumerate(self.directions)]
        y = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return y.reshape(*y.shape[1:]) if squeeze else y


def gru_forward(x, layer: GruLayer, h0=None) -> Tensor:
    return layer(x, h0)


class LstmLayer(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: Rng, bidirectional: bool = True):
        self.input_dim, self.hidden_dim, self.bidirectional = input_dim, hidden_dim, bidirectional
        H = hidden_dim
        self.directions = []
        for _ in range(2 if bidirectional else 1):
            d = Module()
            d.w_ih = uniform_param(rng, (input_dim, 4 * H), input_dim)
            d.w_hh = uniform_param(rng, (H, 4 * H), H)
            d.bias = uniform_param(rng, (4 * H,), H, decay=False)
            self.directions.append(d)

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * len(self.directions)

    def _run(self, x: Tensor, d: Module, reverse: bool) -> Tensor:
        B, T = x.shape[0], x.shape[1]
        H = self.hidden_dim
        gx = x @ d.w_ih + d.bias
        h = c = Tensor(np.zeros((B, H)))
        outs = [None] * T
        for t in (range(T - 1, -1, -1) if reverse else range(T)):
            hc = lstm_cell(gx[:, t], h, c, d.w_hh)
            h, c = hc[:, :H], hc[:, H:]
            outs[t] = h
        return stack(outs, axis=1)

    def forward(self, y):
        y, squeeze = _as_batch(as_tensor(y))
        _check_last(y, self.input_dim, "lstm")
        outs = [self._run(y, d, reverse=i == 1) for i, d in enumerate(self.directions)]
        out = outs[0] if len(outs) == 1 else concat(outs, axis=-1)
        return out.reshape(*out.shape[1:]) if squeeze else out


def lstm_forward(y, layer: LstmLayer) -> Tensor:
    return layer(y)
