"""Evaluation metrics: ROC AUC, Pearson correlation, Lin's concordance
correlation coefficient and the combined stress score."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def auc(scores, labels) -> float:
    """Mann-Whitney estimate of the ROC AUC; tied pairs earn half credit.

    Computed from average ranks, which equals
    ``(#{pos > neg} + 0.5 * #{pos == neg}) / (n_pos * n_neg)``.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels differ in length: {scores.size} vs {labels.size}")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("auc needs both classes present")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedMetricError("pearson needs at least two points")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = (xc * xc).sum(), (yc * yc).sum()
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("pearson is undefined for a constant input")
    return float((xc * yc).sum() / np.sqrt(sxx * syy))


def ccc(pred, target) -> float:
    """Lin's CCC with population (1/n) moments.

    Two constant series score 1.0 when equal and 0.0 otherwise.
    """
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise UndefinedMetricError("ccc needs at least two points")
    mx, my = x.mean(), y.mean()
    xc, yc = x - mx, y - my
    # n * (vx + vy + (mx - my)^2), so only one division happens
    denom = (xc * xc).sum() + (yc * yc).sum() + x.size * (mx - my) ** 2
    if denom == 0.0:
        return 1.0  # both constant and equal; unequal constants give 0 below
    return float(2.0 * (xc * yc).sum() / denom)


def combined_stress(ccc_arousal: float, ccc_valence: float) -> float:
    """Arithmetic mean of the arousal and valence CCCs."""
    return 0.5 * (ccc_arousal + ccc_valence)


METRIC_NAMES = ("auc", "pearson", "ccc_arousal", "ccc_valence", "combined")


@dataclass
class MetricReport:
    task: str
    values: dict[str, float] = field(default_factory=dict)
    n: int = 0

    def __post_init__(self):
        for name, v in self.values.items():
            if name not in METRIC_NAMES:
                raise ValueError(f"unknown metric {name!r}")
            lo = 0.0 if name == "auc" else -1.0
            if not lo - 1e-12 <= v <= 1.0 + 1e-12:
                raise ValueError(f"{name}={v} outside [{lo}, 1]")

    def row(self) -> dict:
        return {"task": self.task, **self.values, "n": self.n}

    def to_csv(self, path) -> None:
        row = self.row()
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(row))
            w.writerow([repr(v) if isinstance(v, float) else v for v in row.values()])

    @classmethod
    def from_csv(cls, path) -> "MetricReport":
        with open(path, newline="", encoding="utf-8") as fh:
            (row,) = list(csv.DictReader(fh))
        task, n = row.pop("task"), int(row.pop("n"))
        return cls(task, {k: float(v) for k, v in row.items()}, n)
