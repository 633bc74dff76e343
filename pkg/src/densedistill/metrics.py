"""Classification metrics: confusion-matrix scores, ROC curve, AUC.

The ROC sweeps every distinct score as a threshold, so tied
positive/negative scores produce diagonal segments and the trapezoidal
area equals the Mann-Whitney pairwise statistic with half credit for ties.
The five threshold metrics use a fixed decision threshold (default 0.5,
prediction positive at scores >= threshold).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation


@dataclass
class MetricsReport:
    acc: float
    pre: float
    sen: float
    spe: float
    f1: float
    auc: float | None
    roc_points: list[tuple[float, float]] = field(default_factory=list)
    n_pos: int = 0
    n_neg: int = 0

    def to_dict(self) -> dict:
        return {
            "acc": self.acc, "pre": self.pre, "sen": self.sen,
            "spe": self.spe, "f1": self.f1, "auc": self.auc,
            "n_pos": self.n_pos, "n_neg": self.n_neg,
        }


def roc_curve(scores: np.ndarray, labels: np.ndarray) -> list[tuple[float, float]]:
    """(fpr, tpr) points from (0,0) to (1,1), one per distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    points = [(0.0, 0.0)]
    for t in sorted(set(scores.tolist()), reverse=True):
        tpr = float(((scores >= t) & (labels == 1)).sum()) / n_pos
        fpr = float(((scores >= t) & (labels == 0)).sum()) / n_neg
        points.append((fpr, tpr))
    if points[-1] != (1.0, 1.0):
        points.append((1.0, 1.0))
    return points


def trapezoid_auc(points: list[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points[:-1], points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Six-metric report from positive-class scores and binary labels.

    With a single-class label set the AUC is undefined; the report then
    carries ``auc=None`` and an empty ROC while the threshold metrics are
    still filled in.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or len(scores) == 0:
        raise ContractViolation("scores and labels must be equal-length 1-D and non-empty")
    if bool((scores < 0).any()) or bool((scores > 1).any()):
        raise ContractViolation("scores must lie in [0, 1]")
    if not set(np.unique(labels)).issubset({0, 1}):
        raise ContractViolation("labels must be in {0, 1}")

    pred = scores >= threshold
    pos = labels == 1
    neg = labels == 0
    tp = int((pred & pos).sum())
    fp = int((pred & neg).sum())
    tn = int((~pred & neg).sum())
    fn = int((~pred & pos).sum())
    n_pos, n_neg = int(pos.sum()), int(neg.sum())

    acc = (tp + tn) / len(labels)
    pre = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    sen = tp / n_pos if n_pos > 0 else 0.0
    spe = tn / n_neg if n_neg > 0 else 0.0
    f1 = 2.0 * pre * sen / (pre + sen) if (pre + sen) > 0 else 0.0

    if n_pos == 0 or n_neg == 0:
        return MetricsReport(acc, pre, sen, spe, f1, auc=None,
                             roc_points=[], n_pos=n_pos, n_neg=n_neg)
    points = roc_curve(scores, labels)
    return MetricsReport(acc, pre, sen, spe, f1, auc=trapezoid_auc(points),
                         roc_points=points, n_pos=n_pos, n_neg=n_neg)


def aggregate_folds(reports: list[MetricsReport]) -> dict:
    """Per-fold table plus the arithmetic mean of every metric."""
    if not reports:
        raise ContractViolation("no fold reports to aggregate")
    out: dict = {}
    keys = ("acc", "pre", "sen", "spe", "f1", "auc")
    for i, rep in enumerate(reports):
        out[f"fold_{i}"] = rep.to_dict()
    mean = {}
    for k in keys:
        values = [getattr(r, k) for r in reports]
        if any(v is None for v in values):
            mean[k] = None
        else:
            mean[k] = float(np.mean(values))
    out["mean"] = mean
    return out


def export_roc(report: MetricsReport, csv_path: str | Path, plot_path: str | Path | None = None) -> Path:
    """ROC as a two-column CSV, optionally with a rendered plot."""
    csv_path = Path(csv_path)
    csv_path.parent.mkdir(parents=True, exist_ok=True)
    with csv_path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for fpr, tpr in report.roc_points:
            writer.writerow([repr(fpr), repr(tpr)])
    if plot_path is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        xs = [p[0] for p in report.roc_points]
        ys = [p[1] for p in report.roc_points]
        label = f"AUC = {report.auc:.3f}" if report.auc is not None else "AUC undefined"
        ax.plot(xs, ys, label=label)
        ax.plot([0, 1], [0, 1], "k--", linewidth=0.8)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.legend(loc="lower right")
        fig.savefig(plot_path, dpi=120, bbox_inches="tight")
        plt.close(fig)
    return csv_path


def import_roc(csv_path: str | Path) -> list[tuple[float, float]]:
    points = []
    with Path(csv_path).open() as fh:
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            points.append((float(row[0]), float(row[1])))
    return points
