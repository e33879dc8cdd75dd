"""Binary detection metrics: confusion counts, P/R/F1, rank AUC, grouping."""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "auc")
CSV_FIELDS = ("epoch", "split", "acc", "prec", "recall", "f1", "auc", "loss", "lr")


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. AUC with one class)."""


@dataclass
class EvalReport:
    group: str
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def _binary(x, name: str) -> np.ndarray:
    arr = np.asarray(x).astype(np.int64).reshape(-1)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr


def confusion(preds, labels) -> tuple[int, int, int, int]:
    """(tp, fp, tn, fn) with class 1 (AI-generated) as positive."""
    p = _binary(preds, "preds")
    y = _binary(labels, "labels")
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {y.size} labels")
    if p.size == 0:
        raise ValueError("need at least one sample")
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    tn = int(np.sum((p == 0) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    return tp, fp, tn, fn


def prf1(tp: int, fp: int, tn: int, fn: int) -> tuple[float, float, float, float]:
    """Return (precision, recall, f1, accuracy); 0/0 ratios are 0."""
    n = tp + fp + tn + fn
    if n < 1:
        raise ValueError("empty confusion matrix")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1, (tp + tn) / n


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0  # mean of ranks starts+1 .. ends
    ranks = np.empty(x.size, dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: fraction of (positive, negative) pairs ordered correctly, ties 1/2."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    if s.shape != y.shape:
        raise ValueError(f"length mismatch: {s.size} scores vs {y.size} labels")
    if np.isnan(s).any():
        raise ValueError("scores contain NaN")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = midranks(s)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def evaluate(scores, labels, group: str = "all", threshold: float = 0.5) -> EvalReport:
    """Full report from probability scores; class 1 iff score >= threshold."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    preds = (s >= threshold).astype(np.int64)
    tp, fp, tn, fn = confusion(preds, labels)
    precision, recall, f1, accuracy = prf1(tp, fp, tn, fn)
    return EvalReport(group, tp, fp, tn, fn, accuracy, precision, recall, f1, auc(s, labels))


def grouped_reports(
    scores,
    labels,
    generators: Sequence[str],
    seed: int = 0,
) -> list[EvalReport]:
    """One report per fake generator plus an unweighted ``Avg`` row.

    Each generator's fakes are paired with a real subset of the same size
    (or all reals if fewer), drawn without replacement with ``seed``.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = _binary(labels, "labels")
    gens = np.asarray(list(generators), dtype=object)
    if gens.shape != y.shape:
        raise ValueError("one generator name per sample required")
    real_idx = np.flatnonzero(y == 0)
    if real_idx.size == 0:
        raise UndefinedMetricError("no real samples to pair with")
    rng = np.random.default_rng(seed)
    reports = []
    for name in sorted({g for g, lab in zip(gens, y) if lab == 1}):
        fake_idx = np.flatnonzero((y == 1) & (gens == name))
        k = min(fake_idx.size, real_idx.size)
        reals = rng.choice(real_idx, size=k, replace=False)
        idx = np.concatenate([fake_idx, np.sort(reals)])
        reports.append(evaluate(s[idx], y[idx], group=str(name)))
    if not reports:
        raise UndefinedMetricError("no fake samples")
    reports.append(average_report(reports))
    return reports


def average_report(reports: Iterable[EvalReport], group: str = "Avg") -> EvalReport:
    reports = list(reports)
    counts = {k: int(sum(getattr(r, k) for r in reports)) for k in ("tp", "fp", "tn", "fn")}
    means = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return EvalReport(group=group, **counts, **means)


def write_metrics_csv(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in CSV_FIELDS})


def csv_row(epoch: int, split: str, report: EvalReport, loss: float, lr: float) -> dict:
    return {
        "epoch": epoch,
        "split": split,
        "acc": report.accuracy,
        "prec": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "auc": report.auc,
        "loss": loss,
        "lr": lr,
    }


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return "" if v is None else v
