"""Config-driven experiment runner.

A config is a TOML file::

    task = "humor"            # humor | reaction | stress-arousal | stress-valence
    seed = 0
    out_dir = "runs/humor"

    [data]
    source = "synthetic"      # synthetic | csv
    win_len = 32              # window length in timesteps
    win_hop = 32

    [data.synthetic]          # SyntheticSpec fields, plus:
    n_train = 64
    n_dev = 32

    # csv source instead:
    # hop_ms = 500
    # labels = "labels.csv"
    # dev_segments = [7, 8]
    # [[data.modalities]]
    # name = "audio"
    # feature_set = "egemaps"
    # path = "audio.csv"

    [model]                   # TemmaConfig / SaGruConfig fields except modality_dims
    d_model = 32

    [train]                   # TrainConfig fields
    lr = 1e-3

    [fusion_train]            # stress tasks only: second-stage TrainConfig
    lr = 0.002

Relative paths resolve against the config file's directory.  The runner
writes ``history.csv``, ``metrics.csv``, ``checkpoint.npz`` and
``config.json`` (the resolved config) into ``out_dir``.
"""
from __future__ import annotations

import copy
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

import numpy as np

from . import data as D
from .metrics import MetricReport, UndefinedMetricError
from .models import SaGruConfig, StressModel, Temma, TemmaConfig, save_checkpoint
from .tensor import Rng
from .training import (
    ArrayDataset,
    Task,
    TrainConfig,
    TrainingError,
    evaluate,
    run_model,
    train,
    write_history,
)

TASKS = ("humor", "reaction", "stress-arousal", "stress-valence")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 1, 2, 3

# Per-task training defaults.  humor/reaction: Adam, halve after 5 flat
# epochs, stop after 15.  stress: AdamW, 100 epochs, halve after 15, no early
# stop; the fusion stage runs at most 20 epochs at lr 0.002, batch 64.
TRAIN_DEFAULTS = {
    "humor": dict(optimizer="adam", lr=1e-3, batch_size=64, max_epochs=200, lr_patience=5, stop_patience=15),
    "reaction": dict(optimizer="adam", lr=1e-4, batch_size=64, max_epochs=200, lr_patience=5, stop_patience=15),
    "stress": dict(optimizer="adamw", lr=1e-3, batch_size=256, max_epochs=100, lr_patience=15, stop_patience=None),
}
FUSION_DEFAULTS = dict(optimizer="adamw", lr=0.002, batch_size=64, max_epochs=20, lr_patience=15, stop_patience=None)


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, code: int, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage, self.code = stage, code


@dataclass
class ExperimentConfig:
    task: str
    seed: int = 0
    out_dir: str = "runs/out"
    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    fusion_train: TrainConfig | None = None
    base_dir: str = "."

    @property
    def is_stress(self) -> bool:
        return self.task.startswith("stress")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d


def _train_config(section: dict, defaults: dict, where: str) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"[{where}] unknown keys {sorted(unknown)}")
    try:
        return TrainConfig(**{**defaults, **section})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where}] {exc}") from None


def config_from_dict(raw: dict, base_dir=".", overrides: dict | None = None) -> ExperimentConfig:
    raw = copy.deepcopy(raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            raw[k] = v
    unknown = set(raw) - {"task", "seed", "out_dir", "data", "model", "train", "fusion_train"}
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    task = raw.get("task")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    family = "stress" if task.startswith("stress") else task
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    data = raw.get("data", {})
    if data.get("source", "synthetic") not in ("synthetic", "csv"):
        raise ConfigError("data.source must be synthetic or csv")
    cfg = ExperimentConfig(
        task=task,
        seed=seed,
        out_dir=str(raw.get("out_dir", f"runs/{task}")),
        data=data,
        model=raw.get("model", {}),
        train=_train_config(raw.get("train", {}), TRAIN_DEFAULTS[family], "train"),
        fusion_train=_train_config(raw.get("fusion_train", {}), FUSION_DEFAULTS, "fusion_train")
        if family == "stress" else None,
        base_dir=str(base_dir),
    )
    return cfg


def load_config(path, overrides: dict | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw, path.parent, overrides)


# ---------------------------------------------------------------------------
# data stage


def _label_columns(cfg: ExperimentConfig, names: list[str] | None = None) -> list[int] | None:
    if not cfg.is_stress:
        return None
    target = cfg.task.split("-")[1]
    if names is None:
        return [0 if target == "arousal" else 1]
    if target not in names:
        raise D.DataError(f"label file has no {target!r} column")
    return [names.index(target)]


def _synthetic_samples(cfg: ExperimentConfig):
    syn = dict(cfg.data.get("synthetic", {}))
    n_train, n_dev = int(syn.pop("n_train", 64)), int(syn.pop("n_dev", 32))
    syn.setdefault("task", {"humor": "binary", "reaction": "intensity"}.get(cfg.task, "series"))
    syn.setdefault("seed", cfg.seed)
    if "t_range" in syn:
        syn["t_range"] = tuple(syn["t_range"])
    try:
        spec = D.SyntheticSpec(n_samples=n_train + n_dev, **syn)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[data.synthetic] {exc}") from None
    samples = D.generate_synthetic(spec)
    return samples[:n_train], samples[n_train:], None


def _csv_samples(cfg: ExperimentConfig):
    dc = cfg.data
    mods = dc.get("modalities")
    if not mods or "labels" not in dc or "hop_ms" not in dc:
        raise ConfigError("csv data needs data.modalities, data.labels and data.hop_ms")
    tables = []
    for m in mods:
        if "path" not in m:
            raise ConfigError("every data.modalities entry needs a path")
        tables.append(D.load_feature_csv(cfg.resolve(m["path"]), m.get("name"), m.get("feature_set")))
    kind, labels, names = D.load_label_csv(cfg.resolve(dc["labels"]))
    if (kind == "series") != cfg.is_stress:
        raise D.DataError(f"{cfg.task} needs {'per-timestep' if cfg.is_stress else 'per-sample'} labels")
    samples = []
    for s in D.align_segments(tables, int(dc["hop_ms"])):
        key = int(s.sample_id) if kind == "series" else s.sample_id
        if key not in labels:
            if kind == "series" and list(labels) == [0] and len(tables[0].segments()) == 1:
                key = 0
            else:
                raise D.DataError(f"no labels for segment {s.sample_id}")
        samples.append(D.attach_labels(s, labels[key]))
    dev_ids = {str(v) for v in dc.get("dev_segments", [])}
    if not dev_ids:
        order = Rng(cfg.seed).permutation(len(samples))
        n_dev = max(1, round(len(samples) * float(dc.get("dev_fraction", 0.25))))
        dev_ids = {samples[i].sample_id for i in order[:n_dev]}
    train_s = [s for s in samples if s.sample_id not in dev_ids]
    dev_s = [s for s in samples if s.sample_id in dev_ids]
    return train_s, dev_s, names


def prepare_data(cfg: ExperimentConfig) -> tuple[ArrayDataset, ArrayDataset]:
    source = cfg.data.get("source", "synthetic")
    train_s, dev_s, names = _synthetic_samples(cfg) if source == "synthetic" else _csv_samples(cfg)
    if not train_s or not dev_s:
        raise D.DataError("train and dev splits must both be non-empty")
    T = max(s.T for s in train_s + dev_s)
    win = int(cfg.data.get("win_len", T))
    hop = int(cfg.data.get("win_hop", win))
    train_w = [w for s in train_s for w in D.window(s, win, hop)]
    dev_w = [w for s in dev_s for w in D.window(s, win, hop)]
    train_w, stats = D.normalize(train_w)
    dev_w, _ = D.normalize(dev_w, stats)
    cols = _label_columns(cfg, names if source == "csv" else None)
    return D.to_arrays(train_w, cols), D.to_arrays(dev_w, cols)


# ---------------------------------------------------------------------------
# training stage


def _model_config(cfg: ExperimentConfig, dims: list[int]):
    try:
        if cfg.is_stress:
            return SaGruConfig(dims, **cfg.model)
        return TemmaConfig.for_task(cfg.task, dims, **cfg.model)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[model] {exc}") from None


def _single(data: ArrayDataset, m: int) -> ArrayDataset:
    return ArrayDataset([data.inputs[m]], data.targets, data.mask)


def train_temma(cfg: ExperimentConfig, train_d: ArrayDataset, dev_d: ArrayDataset, ckpt=None):
    model = Temma(_model_config(cfg, [x.shape[-1] for x in train_d.inputs]), Rng(cfg.seed))
    res = train(model, train_d, dev_d, Task(cfg.task), cfg.train, Rng(cfg.seed + 1), stage="temma",
                checkpoint_path=ckpt, seed=cfg.seed)
    return model, res.history, res.best_epoch


def train_stress(cfg: ExperimentConfig, train_d: ArrayDataset, dev_d: ArrayDataset, ckpt=None):
    """Per-modality SA-GRUs first, then the fusion Bi-LSTM on their frozen outputs."""
    model = StressModel(_model_config(cfg, [x.shape[-1] for x in train_d.inputs]), Rng(cfg.seed))
    task = Task("series")
    streams = Rng(cfg.seed + 1).spawn(len(model.branches) + 1)
    history = []
    for m, branch in enumerate(model.branches):
        res = train(branch, _single(train_d, m), _single(dev_d, m), task, cfg.train, streams[m], stage=f"branch{m}")
        history += res.history
    preds_train = [run_model(b, _single(train_d, m)) for m, b in enumerate(model.branches)]
    preds_dev = [run_model(b, _single(dev_d, m)) for m, b in enumerate(model.branches)]
    res = train(model.fusion, ArrayDataset(preds_train, train_d.targets, train_d.mask),
                ArrayDataset(preds_dev, dev_d.targets, dev_d.mask), task, cfg.fusion_train, streams[-1],
                stage="fusion")
    history += res.history
    if ckpt is not None:
        save_checkpoint(ckpt, model, cfg.seed, res.best_epoch)
    return model, history, res.best_epoch


def metric_report(cfg: ExperimentConfig, model, dev_d: ArrayDataset) -> MetricReport:
    if cfg.is_stress:
        value = evaluate(model, dev_d, Task("series"))[0]
        return MetricReport(cfg.task, {f"ccc_{cfg.task.split('-')[1]}": value}, len(dev_d))
    name = "auc" if cfg.task == "humor" else "pearson"
    return MetricReport(cfg.task, {name: evaluate(model, dev_d, Task(cfg.task))[0]}, len(dev_d))


def run_experiment(config_path, overrides: dict | None = None, stream=sys.stderr) -> int:
    """Run load -> align -> window -> normalize -> train -> evaluate; return an exit code."""
    try:
        try:
            cfg = load_config(config_path, overrides)
        except ConfigError as exc:
            raise StageError("config", EXIT_CONFIG, str(exc)) from None
        out = cfg.resolve(cfg.out_dir)
        try:
            train_d, dev_d = prepare_data(cfg)
        except ConfigError as exc:
            raise StageError("config", EXIT_CONFIG, str(exc)) from None
        except (D.DataError, OSError, UndefinedMetricError) as exc:
            raise StageError("data", EXIT_DATA, str(exc)) from None
        try:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "config.json", "w", encoding="utf-8") as fh:
                json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
                fh.write("\n")
        except OSError as exc:
            raise StageError("output", EXIT_CONFIG, str(exc)) from None
        try:
            runner = train_stress if cfg.is_stress else train_temma
            model, history, best_epoch = runner(cfg, train_d, dev_d, out / "checkpoint.npz")
            write_history(out / "history.csv", history)
            metric_report(cfg, model, dev_d).to_csv(out / "metrics.csv")
        except ConfigError as exc:
            raise StageError("config", EXIT_CONFIG, str(exc)) from None
        except (TrainingError, UndefinedMetricError, ValueError) as exc:
            raise StageError("training", EXIT_TRAIN, str(exc)) from None
    except StageError as exc:
        print(f"error: {exc}", file=stream)
        return exc.code
    return EXIT_OK
