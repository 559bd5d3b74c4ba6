"""Feature tables, alignment, windowing, normalisation and synthetic data.

Feature CSV layout (UTF-8, comma separated, ``.`` decimals)::

    timestamp,segment_id,f_0,...,f_{d-1}

with integer millisecond timestamps.  Label CSVs are either per sample
(``sample_id,<targets>``) or per timestep (``timestamp,arousal,valence``,
optionally with a ``segment_id`` column after ``timestamp`` when one file
covers several segments).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import Rng

# Known per-timestep feature-set widths.
FEATURE_DIMS = {
    "egemaps": 88,
    "deepspectrum": 1024,
    "is09": 384,
    "is13": 6373,
    "mfcc": 120,
    "cnn14": 2048,
    "bert": 768,
    "phrase": 256,
}


class DataError(ValueError):
    pass


@dataclass
class FeatureTable:
    modality: str
    columns: list[str]
    timestamps: np.ndarray  # int64 [N], milliseconds
    segment_ids: np.ndarray  # int64 [N]
    features: np.ndarray  # float64 [N, d]

    def __len__(self) -> int:
        return len(self.timestamps)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def segments(self) -> list[int]:
        return sorted(set(self.segment_ids.tolist()))

    def segment(self, seg: int) -> "FeatureTable":
        keep = self.segment_ids == seg
        return replace(self, timestamps=self.timestamps[keep], segment_ids=self.segment_ids[keep],
                       features=self.features[keep])


@dataclass
class AlignedSample:
    sample_id: str
    features: list[np.ndarray]  # M arrays [T, d_m]
    timestamps: np.ndarray  # [T]
    labels: np.ndarray | None = None  # [K] per sample or [T, K] per timestep
    label_kind: str = "sample"  # "sample" | "series"
    mask: np.ndarray | None = None  # bool [T], False on padding
    modalities: list[str] = field(default_factory=list)
    padded: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = len(self.timestamps)
        if any(f.shape[0] != T for f in self.features):
            raise DataError(f"{self.sample_id}: modality lengths {[f.shape[0] for f in self.features]} != {T}")
        if self.mask is None:
            self.mask = np.ones(T, dtype=bool)
        if self.label_kind == "series" and self.labels is not None and len(self.labels) != T:
            raise DataError(f"{self.sample_id}: {len(self.labels)} label steps for {T} timesteps")

    @property
    def T(self) -> int:
        return len(self.timestamps)


def _parse_int(text: str, path, row: int, what: str) -> int:
    try:
        v = float(text)
    except ValueError:
        raise DataError(f"{path}: row {row}: unparseable {what} {text!r}") from None
    if v != int(v):
        raise DataError(f"{path}: row {row}: {what} must be an integer, got {text!r}")
    return int(v)


def load_feature_csv(path, modality: str | None = None, feature_set: str | None = None) -> FeatureTable:
    """Parse a feature CSV; row numbers in errors count the header as row 1."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["timestamp", "segment_id"] or len(header) < 3:
            raise DataError(f"{path}: header must start with timestamp,segment_id and name feature columns")
        d = len(header) - 2
        if feature_set is not None:
            expected = FEATURE_DIMS.get(feature_set.lower())
            if expected is not None and expected != d:
                raise DataError(f"{path}: {feature_set} has {expected} features, file has {d}")
        ts, segs, rows = [], [], []
        last = {}
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}: row {lineno}: expected {len(header)} fields, got {len(rec)}")
            t = _parse_int(rec[0], path, lineno, "timestamp")
            s = _parse_int(rec[1], path, lineno, "segment_id")
            try:
                vals = [float(v) for v in rec[2:]]
            except ValueError:
                raise DataError(f"{path}: row {lineno}: unparseable number") from None
            if not all(math.isfinite(v) for v in vals):
                raise DataError(f"{path}: row {lineno}: non-finite feature value")
            if s in last and t <= last[s]:
                raise DataError(f"{path}: row {lineno}: timestamp {t} not after {last[s]} in segment {s}")
            last[s] = t
            ts.append(t)
            segs.append(s)
            rows.append(vals)
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return FeatureTable(modality or feature_set or str(path), header[2:], np.array(ts, dtype=np.int64),
                        np.array(segs, dtype=np.int64), feats)


def write_feature_csv(path, table: FeatureTable) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["timestamp", "segment_id", *table.columns])
        for t, s, row in zip(table.timestamps, table.segment_ids, table.features):
            w.writerow([int(t), int(s), *(repr(float(v)) for v in row)])


def load_label_csv(path):
    """Return ``("sample", {sample_id: [K]}, names)`` or
    ``("series", {segment_id: (timestamps, [N, K])}, names)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise DataError(f"{path}: missing label header")
        rows = [(i, r) for i, r in enumerate(reader, start=2) if r]
    for lineno, r in rows:
        if len(r) != len(header):
            raise DataError(f"{path}: row {lineno}: expected {len(header)} fields, got {len(r)}")

    def floats(vals, lineno):
        try:
            return [float(v) for v in vals]
        except ValueError:
            raise DataError(f"{path}: row {lineno}: unparseable number") from None

    if header[0] == "sample_id":
        return "sample", {r[0]: np.array(floats(r[1:], i)) for i, r in rows}, header[1:]
    if header[0] != "timestamp":
        raise DataError(f"{path}: first label column must be sample_id or timestamp")
    has_seg = len(header) > 1 and header[1] == "segment_id"
    names = header[2:] if has_seg else header[1:]
    series: dict[int, tuple[list, list]] = {}
    for lineno, r in rows:
        t = _parse_int(r[0], path, lineno, "timestamp")
        seg = _parse_int(r[1], path, lineno, "segment_id") if has_seg else 0
        ts, vals = series.setdefault(seg, ([], []))
        if ts and t <= ts[-1]:
            raise DataError(f"{path}: row {lineno}: timestamp {t} not after {ts[-1]}")
        ts.append(t)
        vals.append(floats(r[2:] if has_seg else r[1:], lineno))
    return "series", {s: (np.array(ts, dtype=np.int64), np.array(v)) for s, (ts, v) in series.items()}, names


def _native_step(ts: np.ndarray, hop_ms: int) -> int:
    return int(np.median(np.diff(ts))) if len(ts) > 1 else hop_ms


def hold_resample(timestamps: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Value of the latest sample at or before each grid time."""
    idx = np.searchsorted(timestamps, grid, side="right") - 1
    if (idx < 0).any():
        raise DataError("grid starts before the first sample")
    return values[idx]


def align_modalities(tables: list[FeatureTable], hop_ms: int, sample_id: str | None = None) -> AlignedSample:
    """Resample single-segment tables onto a shared ``hop_ms`` grid.

    Each table covers ``[first, last + native step)``; the grid starts at the
    latest first timestamp and holds ``floor(overlap / hop_ms)`` points.
    """
    if not tables:
        raise DataError("no tables to align")
    if hop_ms <= 0:
        raise DataError("hop_ms must be positive")
    for tab in tables:
        if len(tab) == 0:
            raise DataError(f"{tab.modality}: empty table")
        if len(set(tab.segment_ids.tolist())) > 1:
            raise DataError(f"{tab.modality}: align one segment at a time (see align_segments)")
    start = max(int(tab.timestamps[0]) for tab in tables)
    end = min(int(tab.timestamps[-1]) + _native_step(tab.timestamps, hop_ms) for tab in tables)
    T = (end - start) // hop_ms if end > start else 0
    if T < 1:
        raise DataError(f"time ranges of {[t.modality for t in tables]} do not overlap")
    grid = start + hop_ms * np.arange(T, dtype=np.int64)
    feats = [hold_resample(tab.timestamps, tab.features, grid) for tab in tables]
    sid = sample_id if sample_id is not None else str(int(tables[0].segment_ids[0]))
    return AlignedSample(sid, feats, grid, modalities=[t.modality for t in tables])


def align_segments(tables: list[FeatureTable], hop_ms: int) -> list[AlignedSample]:
    """Align every segment present in all tables."""
    common = set(tables[0].segments())
    for tab in tables[1:]:
        common &= set(tab.segments())
    return [align_modalities([t.segment(s) for t in tables], hop_ms, str(s)) for s in sorted(common)]


def attach_labels(sample: AlignedSample, labels) -> AlignedSample:
    """``labels`` is a ``[K]`` vector or a ``(timestamps, [N, K])`` series."""
    if isinstance(labels, tuple):
        ts, vals = labels
        return replace(sample, labels=hold_resample(ts, vals, sample.timestamps), label_kind="series")
    return replace(sample, labels=np.atleast_1d(np.asarray(labels, dtype=np.float64)), label_kind="sample")


def window(sample: AlignedSample, win_len: int, hop: int) -> list[AlignedSample]:
    """Overlapping windows; the last one is zero-padded (mask False) if short."""
    if win_len < 1 or hop < 1:
        raise ValueError("win_len and hop must be >= 1")
    T = sample.T
    n = 1 + math.ceil(max(T - win_len, 0) / hop)
    out = []
    for w in range(n):
        s = w * hop
        e = min(s + win_len, T)
        fill = win_len - (e - s)

        def cut(a):
            part = a[s:e]
            if fill:
                part = np.concatenate([part, np.zeros((fill, *a.shape[1:]), dtype=a.dtype)])
            return part

        ts = sample.timestamps[s:e]
        if fill:
            step = int(ts[-1] - ts[-2]) if len(ts) > 1 else 1
            ts = np.concatenate([ts, ts[-1] + step * np.arange(1, fill + 1)])
        labels = sample.labels
        if labels is not None and sample.label_kind == "series":
            labels = cut(labels)
        mask = cut(sample.mask)
        out.append(replace(sample, sample_id=f"{sample.sample_id}:{w}", features=[cut(f) for f in sample.features],
                           timestamps=ts, labels=labels, mask=mask, padded=bool(fill)))
    return out


@dataclass
class NormStats:
    mean: list[np.ndarray]
    std: list[np.ndarray]


def normalize(dataset: list[AlignedSample], stats: NormStats | None = None):
    """Per-feature z-score.  Stats come from the valid (unpadded) timesteps of
    ``dataset`` unless given; features with std < 1e-8 are left untouched."""
    if not dataset:
        raise DataError("cannot normalize an empty dataset")
    M = len(dataset[0].features)
    if stats is None:
        means, stds = [], []
        for m in range(M):
            rows = np.concatenate([s.features[m][s.mask] for s in dataset])
            mu, sd = rows.mean(axis=0), rows.std(axis=0)
            const = sd < 1e-8
            means.append(np.where(const, 0.0, mu))
            stds.append(np.where(const, 1.0, sd))
        stats = NormStats(means, stds)
    if len(stats.mean) != M:
        raise DataError(f"stats cover {len(stats.mean)} modalities, data has {M}")
    out = []
    for s in dataset:
        feats = []
        for m, f in enumerate(s.features):
            if f.shape[1] != stats.mean[m].shape[0]:
                raise DataError(f"modality {m}: stats dim {stats.mean[m].shape[0]} != {f.shape[1]}")
            z = (f - stats.mean[m]) / stats.std[m]
            feats.append(np.where(s.mask[:, None], z, f))
        out.append(replace(s, features=feats))
    return out, stats


def denormalize(dataset: list[AlignedSample], stats: NormStats) -> list[AlignedSample]:
    return [
        replace(s, features=[np.where(s.mask[:, None], f * stats.std[m] + stats.mean[m], f)
                             for m, f in enumerate(s.features)])
        for s in dataset
    ]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class SyntheticSpec:
    modality_dims: list[int] = field(default_factory=lambda: [16, 16])
    t_range: tuple[int, int] = (32, 32)
    n_samples: int = 96
    latent_dim: int = 4
    noise: list[float] = field(default_factory=lambda: [0.5, 0.5])
    task: str = "binary"  # binary | intensity | series
    seed: int = 0
    smoothness: float = 0.9
    hop_ms: int = 40

    def __post_init__(self):
        if len(self.noise) != len(self.modality_dims):
            raise ValueError("one noise level per modality is required")
        if min(self.noise) < 0:
            raise ValueError("noise levels must be non-negative")
        if self.task not in ("binary", "intensity", "series"):
            raise ValueError(f"unknown synthetic task {self.task!r}")
        if not 1 <= self.t_range[0] <= self.t_range[1]:
            raise ValueError("t_range must satisfy 1 <= lo <= hi")


def _smooth(z: np.ndarray, width: int = 5) -> np.ndarray:
    kernel = np.ones(width) / width
    padded = np.pad(z, ((width // 2, width // 2), (0, 0)), mode="edge")
    return np.stack([np.convolve(padded[:, j], kernel, mode="valid") for j in range(z.shape[1])], axis=1)


def generate_synthetic(spec: SyntheticSpec) -> list[AlignedSample]:
    """Latent-driven multimodal samples.

    A stationary AR(1) latent path ``z_t`` (dimension ``latent_dim``) is mapped
    into every modality by a fixed random linear map plus Gaussian noise.
    Labels:

    * binary - ``1[mean_t(z_t) . w > 0]``
    * intensity - 7 sigmoids of affine functions of ``mean_t(z_t)``
    * series - ``tanh`` of two projections of the moving-average-smoothed
      latent (arousal, valence), one row per timestep

    ``meta["latent_score"]`` keeps the pre-threshold binary score.
    """
    rng = Rng(spec.seed)
    k = spec.latent_dim
    maps = [rng.normal((k, d)) / math.sqrt(k) for d in spec.modality_dims]
    w = rng.normal((k,))
    w /= np.linalg.norm(w)
    U = rng.normal((k, 7)) * 1.5 / math.sqrt(k)
    c = rng.normal((7,)) * 0.5
    V = rng.normal((k, 2)) / math.sqrt(k)
    rho = spec.smoothness
    names = [f"m{m}" for m in range(len(spec.modality_dims))]
    samples = []
    for i in range(spec.n_samples):
        T = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
        z = np.empty((T, k))
        z[0] = rng.normal((k,))
        for t in range(1, T):
            z[t] = rho * z[t - 1] + math.sqrt(1 - rho * rho) * rng.normal((k,))
        feats = [z @ A + s * rng.normal((T, A.shape[1])) for A, s in zip(maps, spec.noise)]
        zbar = z.mean(axis=0)
        meta = {"latent_score": float(zbar @ w)}
        if spec.task == "binary":
            labels, kind = np.array([float(zbar @ w > 0)]), "sample"
        elif spec.task == "intensity":
            labels, kind = 1.0 / (1.0 + np.exp(-(zbar @ U + c))), "sample"
        else:
            labels, kind = np.tanh(_smooth(z) @ V * 1.5), "series"
        ts = spec.hop_ms * np.arange(T, dtype=np.int64)
        samples.append(AlignedSample(f"syn{i}", feats, ts, labels, kind, modalities=list(names), meta=meta))
    return samples


def split(dataset: list, n_first: int) -> tuple[list, list]:
    return dataset[:n_first], dataset[n_first:]


@dataclass
class ArrayDataset:
    """Stacked equal-length samples ready for batching."""

    inputs: list[np.ndarray]  # M arrays [N, T, d_m]
    targets: np.ndarray  # [N, K] or [N, T, K]
    mask: np.ndarray  # bool [N, T]

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx) -> "ArrayDataset":
        return ArrayDataset([x[idx] for x in self.inputs], self.targets[idx], self.mask[idx])

    def batches(self, batch_size: int, rng: Rng | None = None):
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for s in range(0, len(self), batch_size):
            yield self.take(order[s:s + batch_size])


def to_arrays(samples: list[AlignedSample], targets: list[int] | None = None) -> ArrayDataset:
    """Stack samples (all with the same T); ``targets`` selects label columns."""
    if not samples:
        raise DataError("empty dataset")
    T = samples[0].T
    if any(s.T != T for s in samples):
        raise DataError("samples differ in length; window them first")
    M = len(samples[0].features)
    inputs = [np.stack([s.features[m] for s in samples]) for m in range(M)]
    labels = np.stack([s.labels for s in samples])
    if targets is not None:
        labels = labels[..., targets]
    return ArrayDataset(inputs, labels, np.stack([s.mask for s in samples]))
