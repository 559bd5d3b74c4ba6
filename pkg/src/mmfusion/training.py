"""Losses, Adam/AdamW, the plateau schedule and the training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import ArrayDataset
from .layers import Module
from .models import save_checkpoint
from .tensor import NonFiniteError, Rng, Tensor, as_tensor, clip, log, no_grad

BCE_CLAMP = 1e-7


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# losses


def bce_loss(p, y) -> Tensor:
    p = clip(as_tensor(p), BCE_CLAMP, 1.0 - BCE_CLAMP)
    y = np.asarray(y, dtype=np.float64).reshape(p.shape)
    return -(y * log(p) + (1.0 - y) * log(1.0 - p)).mean()


def mse_loss(pred, y) -> Tensor:
    pred = as_tensor(pred)
    diff = pred - np.asarray(y, dtype=np.float64).reshape(pred.shape)
    return (diff * diff).mean()


def ccc_loss(pred, y) -> Tensor:
    """``1 - CCC`` over all entries, population moments."""
    pred = as_tensor(pred).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if pred.shape != y.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {y.shape}")
    my = y.mean()
    yc = y - my
    vy = (yc * yc).mean()
    mx = pred.mean()
    xc = pred - mx
    vx = (xc * xc).mean()
    denom = vx + vy + (mx - my) * (mx - my)
    if denom.item() == 0.0:
        return Tensor(0.0)
    return 1.0 - 2.0 * (xc * yc).mean() / denom


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def optimizer_step(kind: str, params: list[np.ndarray], grads: list, state: AdamState, lr: float,
                   decay_mask: list[bool] | None = None, weight_decay: float = 0.01,
                   betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam; ``adamw`` first shrinks decayable weights by
    ``lr * weight_decay``.  Returns fresh arrays and the advanced state."""
    if kind not in ("adam", "adamw"):
        raise ValueError(f"unknown optimizer {kind!r}")
    if any(g is None for g in grads):
        raise TrainingError("optimizer step with missing gradients")
    b1, b2 = betas
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t = state.t + 1
    new_params, ms, vs = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        if kind == "adamw" and (decay_mask is None or decay_mask[i]):
            p = p * (1.0 - lr * weight_decay)
        m = b1 * state.m[i] + (1 - b1) * g
        v = b2 * state.v[i] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(t, ms, vs)


class Optimizer:
    """Applies :func:`optimizer_step` in place to a parameter list."""

    def __init__(self, kind: str, params: list[Tensor], weight_decay: float = 0.01):
        if kind not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind, self.params, self.weight_decay = kind, list(params), weight_decay
        self.state = AdamState()

    def step(self, lr: float) -> None:
        new, self.state = optimizer_step(
            self.kind, [p.data for p in self.params], [p.grad for p in self.params], self.state, lr,
            [p.decay for p in self.params], self.weight_decay,
        )
        for p, value in zip(self.params, new):
            p.data[...] = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# schedule


@dataclass
class TrainState:
    lr: float
    lr_patience: int = 5
    stop_patience: int | None = 15
    lr_factor: float = 0.5
    epoch: int = 0
    best_loss: float = math.inf
    best_metric: float = -math.inf
    loss_wait: int = 0
    metric_wait: int = 0
    loss_history: list = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.lr_patience < 1 or (self.stop_patience is not None and self.stop_patience < 1):
            raise ValueError("patience values must be positive")


def schedule_step(state: TrainState, train_loss: float, dev_metric: float) -> tuple[float, bool]:
    """Advance one epoch.

    The lr is multiplied by ``lr_factor`` once ``train_loss`` has failed to
    beat its running best for ``lr_patience`` consecutive epochs (the counter
    restarts after each cut).  Training stops once ``dev_metric`` (higher is
    better) has failed to beat its best for ``stop_patience`` epochs.
    """
    state.epoch += 1
    state.loss_history.append(train_loss)
    if train_loss < state.best_loss:
        state.best_loss, state.loss_wait = train_loss, 0
    else:
        state.loss_wait += 1
        if state.loss_wait >= state.lr_patience:
            state.lr *= state.lr_factor
            state.loss_wait = 0
    if dev_metric > state.best_metric:
        state.best_metric, state.metric_wait = dev_metric, 0
    else:
        state.metric_wait += 1
    stop = state.stop_patience is not None and state.metric_wait >= state.stop_patience
    return state.lr, stop


# ---------------------------------------------------------------------------
# tasks


def _mean_pearson(pred: np.ndarray, y: np.ndarray) -> float:
    vals = []
    for j in range(y.shape[-1]):
        try:
            vals.append(metrics.pearson(pred[:, j], y[:, j]))
        except metrics.UndefinedMetricError:
            vals.append(0.0)  # constant prediction carries no ranking signal
    return float(np.mean(vals))


@dataclass(frozen=True)
class Task:
    """Loss + dev metric pair.  ``kind`` is humor | reaction | series."""

    kind: str

    def loss(self, pred: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
        if self.kind == "humor":
            return bce_loss(pred, targets)
        if self.kind == "reaction":
            return mse_loss(pred, targets)
        idx = np.flatnonzero(mask.reshape(-1))
        return ccc_loss(pred.reshape(-1)[idx], targets.reshape(-1)[idx])

    def metric(self, pred: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
        if self.kind == "humor":
            return metrics.auc(pred.reshape(-1), targets.reshape(-1))
        if self.kind == "reaction":
            return _mean_pearson(np.clip(pred, 0.0, 1.0), targets)
        keep = mask.reshape(-1)
        return metrics.ccc(pred.reshape(-1)[keep], targets.reshape(-1)[keep])


def run_model(model: Module, data: ArrayDataset, batch_size: int = 256) -> np.ndarray:
    """Eval-mode predictions for a whole dataset."""
    model.eval()
    outs = []
    with no_grad():
        for batch in data.batches(batch_size):
            outs.append(model(*batch.inputs, mask=batch.mask).data)
    return np.concatenate(outs)


def evaluate(model: Module, data: ArrayDataset, task: Task, batch_size: int = 256) -> tuple[float, float]:
    """Return ``(metric, loss)`` on ``data``."""
    pred = run_model(model, data, batch_size)
    with no_grad():
        loss = task.loss(Tensor(pred), data.targets, data.mask).item()
    return task.metric(pred, data.targets, data.mask), loss


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 100
    lr_patience: int = 5
    lr_factor: float = 0.5
    stop_patience: int | None = 15
    weight_decay: float = 0.01
    lr_monitor: str = "train_loss"  # train_loss | dev_loss

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("lr, batch_size and max_epochs must be positive")
        if self.lr_factor != 0.5:
            raise ValueError("lr_factor is fixed at 0.5")
        if self.lr_monitor not in ("train_loss", "dev_loss"):
            raise ValueError("lr_monitor must be train_loss or dev_loss")


@dataclass
class HistoryRow:
    stage: str
    epoch: int
    train_loss: float
    dev_metric: float
    lr: float


@dataclass
class TrainResult:
    best_state: dict
    best_metric: float
    best_epoch: int
    history: list[HistoryRow]


def train(model: Module, train_data: ArrayDataset, dev_data: ArrayDataset, task: Task, cfg: TrainConfig,
          rng: Rng, params: list[Tensor] | None = None, stage: str = "model",
          checkpoint_path=None, seed: int = 0) -> TrainResult:
    """Mini-batch training with best-by-dev model selection.

    ``params`` restricts which tensors are optimised (the rest stay frozen).
    On return the model holds the best weights.
    """
    if len(train_data) == 0 or len(dev_data) == 0:
        raise ValueError("train and dev splits must be non-empty")
    params = model.parameters() if params is None else params
    opt = Optimizer(cfg.optimizer, params, cfg.weight_decay if cfg.optimizer == "adamw" else 0.0)
    state = TrainState(cfg.lr, cfg.lr_patience, cfg.stop_patience, cfg.lr_factor)
    history: list[HistoryRow] = []
    best_state, best_metric, best_epoch = model.state_dict(), -math.inf, 0
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            lr = state.lr
            model.train()
            total = 0.0
            for batch in train_data.batches(cfg.batch_size, rng):
                model.zero_grad()
                loss = task.loss(model(*batch.inputs, mask=batch.mask), batch.targets, batch.mask)
                loss.backward()
                opt.step(lr)
                total += loss.item() * len(batch)
            train_loss = total / len(train_data)
            dev_metric, dev_loss = evaluate(model, dev_data, task)
            history.append(HistoryRow(stage, epoch, train_loss, dev_metric, lr))
            if dev_metric > best_metric:
                best_state, best_metric, best_epoch = model.state_dict(), dev_metric, epoch
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, model, seed, epoch)
            monitored = train_loss if cfg.lr_monitor == "train_loss" else dev_loss
            _, stop = schedule_step(state, monitored, dev_metric)
            if stop:
                break
    except NonFiniteError as exc:
        raise TrainingError(f"{stage}: epoch {len(history) + 1}: {exc}") from exc
    model.load_state_dict(best_state)
    return TrainResult(best_state, best_metric, best_epoch, history)


def write_history(path, rows: list[HistoryRow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "epoch", "train_loss", "dev_metric", "lr"])
        for r in rows:
            w.writerow([r.stage, r.epoch, repr(r.train_loss), repr(r.dev_metric), repr(r.lr)])
