"""Confusion-matrix metrics and cross-validated evaluation.

Accuracy = (TP+TN)/Total, precision = TP/(TP+FP), recall = TP/(TP+FN),
F1 = 2PR/(P+R).  Zero-denominator metrics are reported absent with a reason
code instead of being substituted with 0 or 1, which would skew fold
aggregates.  Fold aggregation uses the sample (n-1) standard deviation.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Optional, Sequence

import numpy as np

from .data import DatasetManifest, SplitPlan
from .errors import MetricsError
from .train import TrainConfig, extract_features, predict_head, train_head


@dataclass
class ConfusionMatrix:
    counts: np.ndarray          # K x K, rows = actual, columns = predicted
    classes: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def binary_counts(self, positive: int) -> tuple[int, int, int, int]:
        """(tp, fp, fn, tn) treating class index `positive` one-vs-rest."""
        c = self.counts
        tp = int(c[positive, positive])
        fp = int(c[:, positive].sum() - tp)
        fn = int(c[positive, :].sum() - tp)
        tn = int(c.sum() - tp - fp - fn)
        return tp, fp, fn, tn


def confusion(actual: Sequence[int], predicted: Sequence[int],
              classes: list[str]) -> ConfusionMatrix:
    actual = np.asarray(actual, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if actual.shape != predicted.shape:
        raise MetricsError(
            f"{actual.size} actual vs {predicted.size} predicted labels",
            code="length-mismatch")
    k = len(classes)
    if actual.size and (actual.min() < 0 or actual.max() >= k
                        or predicted.min() < 0 or predicted.max() >= k):
        raise MetricsError(f"labels out of range for {k} classes",
                           code="label-out-of-range")
    counts = np.zeros((k, k), dtype=np.int64)
    for a, p in zip(actual, predicted):
        counts[a, p] += 1
    return ConfusionMatrix(counts=counts, classes=list(classes))


@dataclass
class MetricsReport:
    values: dict[str, float] = dc_field(default_factory=dict)
    absent: dict[str, str] = dc_field(default_factory=dict)   # metric -> reason code
    per_class: dict[str, dict] = dc_field(default_factory=dict)
    positive_class: Optional[str] = None

    def as_dict(self) -> dict:
        doc = {"values": dict(self.values), "absent": dict(self.absent)}
        if self.per_class:
            doc["per_class"] = self.per_class
        if self.positive_class is not None:
            doc["positive_class"] = self.positive_class
        return doc


def _binary_metrics(tp: int, fp: int, fn: int, tn: int) -> tuple[dict, dict]:
    values: dict[str, float] = {}
    absent: dict[str, str] = {}
    total = tp + fp + fn + tn
    values["accuracy"] = (tp + tn) / total
    if tp + fp > 0:
        values["precision"] = tp / (tp + fp)
    else:
        absent["precision"] = "no-predicted-positives"
    if tp + fn > 0:
        values["recall"] = tp / (tp + fn)
    else:
        absent["recall"] = "no-actual-positives"
    if "precision" in values and "recall" in values:
        p, r = values["precision"], values["recall"]
        if p + r > 0:
            values["f1"] = 2 * p * r / (p + r)
        else:
            absent["f1"] = "zero-precision-and-recall"
    else:
        absent["f1"] = "precision-or-recall-absent"
    return values, absent


def metrics(cm: ConfusionMatrix, positive: Optional[int] = None) -> MetricsReport:
    """Binary report against the positive class (default: class index 1).
    For K > 2: accuracy plus per-class one-vs-rest values and an unweighted
    macro average over classes where the metric is defined."""
    if cm.total == 0:
        raise MetricsError("confusion matrix is empty", code="empty-matrix")
    k = len(cm.classes)
    if k == 2:
        pos = 1 if positive is None else positive
        values, absent = _binary_metrics(*cm.binary_counts(pos))
        return MetricsReport(values=values, absent=absent,
                             positive_class=cm.classes[pos])
    report = MetricsReport()
    report.values["accuracy"] = float(np.trace(cm.counts)) / cm.total
    macro: dict[str, list[float]] = {"precision": [], "recall": [], "f1": []}
    for ci, cname in enumerate(cm.classes):
        values, absent = _binary_metrics(*cm.binary_counts(ci))
        values.pop("accuracy")
        report.per_class[cname] = {"values": values, "absent": absent}
        for name in macro:
            if name in values:
                macro[name].append(values[name])
    for name, vals in macro.items():
        if vals:
            report.values[f"macro_{name}"] = float(np.mean(vals))
        else:
            report.absent[f"macro_{name}"] = "undefined-for-all-classes"
    return report


def render_confusion(cm: ConfusionMatrix) -> str:
    """Aligned text grid, rows = actual, columns = predicted."""
    width = max([len(c) for c in cm.classes] + [7,
                len(str(int(cm.counts.max()) if cm.total else 0))])
    head = " " * (width + 2) + "  ".join(f"{c:>{width}}" for c in cm.classes)
    lines = [head]
    for ci, cname in enumerate(cm.classes):
        row = "  ".join(f"{int(v):>{width}}" for v in cm.counts[ci])
        lines.append(f"{cname:>{width}}  {row}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# cross-validation

@dataclass
class FoldResult:
    fold: int
    report: MetricsReport
    matrix: ConfusionMatrix


@dataclass
class CrossValReport:
    folds: list[FoldResult]
    mean: dict[str, float]
    std: dict[str, float]
    absent: dict[str, str]

    def as_dict(self) -> dict:
        return {
            "folds": [{"fold": f.fold, **f.report.as_dict()} for f in self.folds],
            "aggregate": {"mean": self.mean, "std": self.std, "absent": self.absent},
        }


def aggregate_folds(reports: list[MetricsReport]) -> tuple[dict, dict, dict]:
    """Mean and sample (ddof=1) standard deviation per metric; a metric
    absent in any fold is reported absent in the aggregate."""
    mean: dict[str, float] = {}
    std: dict[str, float] = {}
    absent: dict[str, str] = {}
    names: list[str] = []
    for r in reports:
        for name in r.values:
            if name not in names:
                names.append(name)
    for name in names:
        if any(name in r.absent for r in reports):
            absent[name] = "absent-in-some-fold"
            continue
        vals = [r.values[name] for r in reports if name in r.values]
        mean[name] = float(np.mean(vals))
        std[name] = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return mean, std, absent


def cross_validate(bundle, manifest: DatasetManifest, plan: SplitPlan,
                   cfg: TrainConfig, cache_dir=None) -> CrossValReport:
    """Per fold: train the head on the train split, select on val, report
    metrics on test; then aggregate mean +/- sample std across folds."""
    X, y, paths = extract_features(bundle, manifest, cache_dir)
    row = {p: i for i, p in enumerate(paths)}
    results: list[FoldResult] = []
    for fold in range(plan.fold_count):
        def take(bucket: str):
            idx = [row[p] for p in plan.paths(fold, bucket)]
            return X[idx], y[idx]

        Xtr, ytr = take("train")
        Xv, yv = take("val")
        Xte, yte = take("test")
        head, _ = train_head(Xtr, ytr, cfg, val=(Xv, yv))
        preds = predict_head(head, Xte)[1]
        cm = confusion(yte, preds, manifest.classes)
        results.append(FoldResult(fold=fold, report=metrics(cm), matrix=cm))
    mean, std, absent = aggregate_folds([r.report for r in results])
    return CrossValReport(folds=results, mean=mean, std=std, absent=absent)
