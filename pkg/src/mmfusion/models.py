"""End-to-end architectures.

* :class:`Temma` - transformer encoder with temporal (per-modality) and
  multimodal (per-timestep, cross-modality) attention, for the humor
  (binary) and reaction (7 intensities) tasks.
* :class:`StressModel` - one self-attention + Bi-GRU regressor per modality
  (:class:`SaGru`) whose per-timestep outputs are late-fused by a Bi-LSTM
  (:class:`LateFusion`).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (
    Conv1dStack,
    Dropout,
    GruLayer,
    LayerNorm,
    Linear,
    LstmLayer,
    ModalityAttention,
    Module,
    MultiHeadAttention,
    PositionalEncoding,
)
from .tensor import DimensionError, Rng, Tensor, as_tensor, clip, no_grad, relu, sigmoid, stack


@dataclass
class TemmaConfig:
    modality_dims: list[int]
    d_model: int = 64
    conv_layers: int = 5
    kernel_size: int = 3
    encoder_blocks: int = 4
    heads: int = 4
    ff_dim: int = 128
    head_hidden: int = 256
    dropout: float = 0.2
    output_dim: int = 1
    output_activation: str = "sigmoid"
    max_len: int = 4096

    def __post_init__(self):
        self.modality_dims = [int(d) for d in self.modality_dims]
        if not self.modality_dims or min(self.modality_dims) < 1:
            raise ValueError("modality_dims must be a non-empty list of positive ints")
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"heads={self.heads} must divide d_model={self.d_model}")
        if self.output_dim not in (1, 7):
            raise ValueError(f"output_dim must be 1 or 7, got {self.output_dim}")
        if self.output_activation not in ("sigmoid", "linear"):
            raise ValueError(f"output_activation must be sigmoid or linear")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def for_task(cls, task: str, modality_dims, **kw) -> "TemmaConfig":
        if task == "humor":
            return cls(modality_dims, output_dim=1, output_activation="sigmoid", **kw)
        if task == "reaction":
            return cls(modality_dims, output_dim=7, output_activation="linear", **kw)
        raise ValueError(f"TEMMA handles humor or reaction, not {task!r}")


@dataclass
class SaGruConfig:
    modality_dims: list[int]
    heads: int = 2
    gru_layers: int = 2
    hidden: int = 64
    bidirectional: bool = True
    fusion_lstm_units: int = 6

    def __post_init__(self):
        self.modality_dims = [int(d) for d in self.modality_dims]
        if not self.modality_dims:
            raise ValueError("modality_dims must be non-empty")
        for d in self.modality_dims:
            if d % self.heads:
                raise ValueError(f"heads={self.heads} must divide modality dim {d}")
        if self.gru_layers < 1 or self.hidden < 1 or self.fusion_lstm_units < 1:
            raise ValueError("gru_layers, hidden and fusion_lstm_units must be positive")


@dataclass
class Prediction:
    values: np.ndarray
    task: str


def _batched(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


class EncoderBlock(Module):
    """TMA -> add & norm -> MMA -> add & norm -> FC -> add & norm on ``[B, M, T, d]``."""

    def __init__(self, cfg: TemmaConfig, rng: Rng):
        d, M = cfg.d_model, len(cfg.modality_dims)
        self.tma = MultiHeadAttention(d, cfg.heads, rng)
        self.mma = ModalityAttention(M, d, cfg.heads, rng)
        self.norm1, self.norm2, self.norm3 = LayerNorm(d), LayerNorm(d), LayerNorm(d)
        self.ff1 = Linear(d, cfg.ff_dim, rng)
        self.ff2 = Linear(cfg.ff_dim, d, rng)
        self.drop = Dropout(cfg.dropout, rng)

    def forward(self, x):
        a, _ = self.tma(x, x, x)
        x = self.norm1(x + self.drop(a))
        b, _ = self.mma(x.swapaxes(-2, -3))
        x = self.norm2(x + self.drop(b.swapaxes(-2, -3)))
        f = self.ff2(relu(self.ff1(x)))
        return self.norm3(x + self.drop(f))


class Temma(Module):
    """Per-modality conv embedding + positional encoding, encoder blocks,
    masked temporal mean-pool, modality concat, FC head."""

    def __init__(self, cfg: TemmaConfig, rng: Rng):
        self.cfg = cfg
        M, d = len(cfg.modality_dims), cfg.d_model
        self.embed = [Conv1dStack(dm, d, rng, cfg.conv_layers, cfg.kernel_size) for dm in cfg.modality_dims]
        self.pe = PositionalEncoding(cfg.max_len, d)
        self.blocks = [EncoderBlock(cfg, rng) for _ in range(cfg.encoder_blocks)]
        self.fc = Linear(M * d, cfg.head_hidden, rng)
        self.drop = Dropout(cfg.dropout, rng)
        self.out = Linear(cfg.head_hidden, cfg.output_dim, rng)

    def encode(self, *inputs, mask=None) -> Tensor:
        """Pooled per-modality encodings ``[B, M, d]``."""
        cfg = self.cfg
        if len(inputs) != len(cfg.modality_dims):
            raise DimensionError(f"expected {len(cfg.modality_dims)} modalities, got {len(inputs)}")
        xs = [_batched(x)[0] for x in inputs]
        T = xs[0].shape[-2]
        if T < 1:
            raise DimensionError("empty sequence")
        for x, dm in zip(xs, cfg.modality_dims):
            if x.ndim != 3 or x.shape[-1] != dm or x.shape[-2] != T or x.shape[0] != xs[0].shape[0]:
                raise DimensionError(f"modality shapes {[x.shape for x in xs]} do not match dims {cfg.modality_dims}")
        pe = self.pe(T)
        h = stack([conv(x) + pe for conv, x in zip(self.embed, xs)], axis=1)
        for block in self.blocks:
            h = block(h)
        if mask is None:
            return h.mean(axis=2)
        m = np.asarray(mask, dtype=np.float64).reshape(xs[0].shape[0], 1, T, 1)
        return (h * m).sum(axis=2) / np.maximum(m.sum(axis=2), 1.0)

    def forward(self, *inputs, mask=None) -> Tensor:
        pooled = self.encode(*inputs, mask=mask)
        B, M, d = pooled.shape
        z = self.drop(relu(self.fc(pooled.reshape(B, M * d))))
        y = self.out(z)
        return sigmoid(y) if self.cfg.output_activation == "sigmoid" else y


class SaGru(Module):
    """Self-attention over one modality's sequence, stacked Bi-GRU, and a
    per-timestep linear head.  ``[B, T, d] -> [B, T]``."""

    def __init__(self, input_dim: int, cfg: SaGruConfig, rng: Rng):
        self.input_dim = input_dim
        self.attention = MultiHeadAttention(input_dim, cfg.heads, rng)
        self.grus = []
        dim = input_dim
        for _ in range(cfg.gru_layers):
            layer = GruLayer(dim, cfg.hidden, rng, bidirectional=cfg.bidirectional)
            self.grus.append(layer)
            dim = layer.output_dim
        self.head = Linear(dim, 1, rng)

    def forward(self, x, mask=None) -> Tensor:
        x, squeeze = _batched(x)
        if x.ndim != 3 or x.shape[-1] != self.input_dim:
            raise DimensionError(f"expected [B, T, {self.input_dim}], got {x.shape}")
        h, _ = self.attention(x, x, x)
        for gru in self.grus:
            h = gru(h)
        y = self.head(h)
        y = y.reshape(*y.shape[:-1])
        return y.reshape(y.shape[-1]) if squeeze else y


class LateFusion(Module):
    """Stack M per-timestep predictions to ``[B, T, M]``, Bi-LSTM, linear head."""

    def __init__(self, n_inputs: int, units: int, rng: Rng, bidirectional: bool = True):
        self.n_inputs = n_inputs
        self.lstm = LstmLayer(n_inputs, units, rng, bidirectional=bidirectional)
        self.head = Linear(self.lstm.output_dim, 1, rng)

    def fuse(self, *predictions) -> Tensor:
        if len(predictions) != self.n_inputs:
            raise DimensionError(f"expected {self.n_inputs} prediction streams, got {len(predictions)}")
        ps = [as_tensor(p) for p in predictions]
        if any(p.shape != ps[0].shape for p in ps):
            raise DimensionError(f"prediction lengths differ: {[p.shape for p in ps]}")
        return stack(ps, axis=-1)

    def forward(self, *predictions, mask=None) -> Tensor:
        fused = self.fuse(*predictions)
        y = self.head(self.lstm(fused))
        return y.reshape(*y.shape[:-1])


class StressModel(Module):
    def __init__(self, cfg: SaGruConfig, rng: Rng):
        self.cfg = cfg
        self.branches = [SaGru(d, cfg, rng) for d in cfg.modality_dims]
        self.fusion = LateFusion(len(cfg.modality_dims), cfg.fusion_lstm_units, rng, cfg.bidirectional)

    def forward(self, *inputs, mask=None) -> Tensor:
        if len(inputs) != len(self.branches):
            raise DimensionError(f"expected {len(self.branches)} modalities, got {len(inputs)}")
        return self.fusion(*[b(x) for b, x in zip(self.branches, inputs)])


def temma_forward(inputs, model: Temma, training: bool = False, mask=None) -> Tensor:
    model.train(training)
    return model(*inputs, mask=mask)


def sagru_modality_forward(x, model: SaGru) -> Tensor:
    return model(x)


def late_fusion_forward(y_a, y_v, y_b, model: LateFusion) -> Tensor:
    return model(y_a, y_v, y_b)


def predict(model: Module, inputs, task: str, mask=None) -> Prediction:
    """Eval-mode forward; reaction intensities are clamped to [0, 1]."""
    model.eval()
    with no_grad():
        y = model(*inputs, mask=mask)
        if task == "reaction":
            y = clip(y, 0.0, 1.0)
    return Prediction(y.data.copy(), task)


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is an uncompressed numpy ``.npz`` archive.  Each parameter is
# stored under ``param/<dotted name>`` as a float64 array; the ``meta`` entry
# is a JSON string with keys ``kind`` ("temma" | "stress"), ``config`` (the
# dataclass fields), ``seed`` and ``epoch``.

_KINDS = {"temma": (Temma, TemmaConfig), "stress": (StressModel, SaGruConfig)}


def model_kind(model: Module) -> str:
    for kind, (cls, _) in _KINDS.items():
        if isinstance(model, cls):
            return kind
    raise TypeError(f"no checkpoint kind for {type(model).__name__}")


def build_model(kind: str, config: dict, seed: int) -> Module:
    cls, cfg_cls = _KINDS[kind]
    return cls(cfg_cls(**config), Rng(seed))


def save_checkpoint(path, model: Module, seed: int, epoch: int) -> None:
    meta = {"kind": model_kind(model), "config": asdict(model.cfg), "seed": int(seed), "epoch": int(epoch)}
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[Module, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    model = build_model(meta["kind"], meta["config"], meta["seed"])
    model.load_state_dict(state)
    return model, meta
