"""Confusion matrices, macro-averaged one-vs-rest metrics and ROC AUC."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

AVERAGING_NOTE = "macro (unweighted mean of one-vs-rest per-class values)"


class MetricsError(ValueError):
    pass


def confusion(true_labels, pred_labels, k: int) -> np.ndarray:
    """``K x K`` counts with rows = true class and columns = predicted class."""
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(pred_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise MetricsError("true and predicted label arrays differ in length")
    if t.size and (min(t.min(), p.min()) < 0 or max(t.max(), p.max()) >= k):
        raise MetricsError(f"label outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def _ratio(num: float, den: float, flag: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(flag)
        return 0.0
    return num / den


def scalar_metrics(cm: np.ndarray) -> dict:
    """Accuracy plus per-class and macro precision/recall/F1/specificity.

    A zero denominator makes that class's value 0 and appends a flag such
    as ``"precision_undefined:2"``.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or total == 0:
        raise MetricsError("confusion matrix is empty or not square")
    flags: list[str] = []
    per_class = []
    for c in range(cm.shape[0]):
        tp = int(cm[c, c])
        fn = int(cm[c].sum()) - tp
        fp = int(cm[:, c].sum()) - tp
        tn = total - tp - fn - fp
        precision = _ratio(tp, tp + fp, f"precision_undefined:{c}", flags)
        recall = _ratio(tp, tp + fn, f"recall_undefined:{c}", flags)
        specificity = _ratio(tn, tn + fp, f"specificity_undefined:{c}", flags)
        f1 = _ratio(2 * precision * recall, precision + recall, f"f1_undefined:{c}", flags)
        per_class.append({"tp": tp, "fp": fp, "fn": fn, "tn": tn, "support": tp + fn,
                          "precision": precision, "recall": recall,
                          "specificity": specificity, "f1": f1})
    macro = {m: float(np.mean([pc[m] for pc in per_class]))
             for m in ("precision", "recall", "f1", "specificity")}
    return {"accuracy": int(np.trace(cm)) / total, **macro,
            "per_class": per_class, "flags": flags}


def binary_auc(scores, positives) -> float:
    """Area under the ROC curve from a threshold sweep over unique scores.

    Ties are resolved by the trapezoid between the tied points, which equals
    counting tied positive/negative pairs as one half.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(positives, dtype=bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("AUC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last_of_run = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tps = np.cumsum(y)[last_of_run]
    fps = (last_of_run + 1) - tps
    tpr = np.r_[0, tps] / n_pos
    fpr = np.r_[0, fps] / n_neg
    return float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))


def roc_auc(scores, true_labels) -> tuple[float, list[Optional[float]], list[str]]:
    """Macro one-vs-rest AUC over the classes that have both outcomes.

    Returns ``(macro, per_class, flags)``; excluded classes get ``None`` and
    an ``auc_excluded:<c>`` flag.
    """
    scores = np.asarray(scores, dtype=np.float64)
    t = np.asarray(true_labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(t):
        raise MetricsError("scores must be [N, K] aligned with the labels")
    if len(np.unique(t)) < 2:
        raise MetricsError("AUC is undefined when only one class is present")
    per_class: list[Optional[float]] = []
    flags = []
    for c in range(scores.shape[1]):
        pos = t == c
        if pos.all() or not pos.any():
            per_class.append(None)
            flags.append(f"auc_excluded:{c}")
            continue
        per_class.append(binary_auc(scores[:, c], pos))
    valid = [a for a in per_class if a is not None]
    return float(np.mean(valid)), per_class, flags


@dataclass
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    specificity: float
    auc: Optional[float]
    confusion: list
    per_class: list
    class_names: list
    flags: list = field(default_factory=list)
    averaging: str = AVERAGING_NOTE

    def to_dict(self) -> dict:
        return asdict(self)

    def csv_rows(self, experiment: str = "eval") -> list[list]:
        rows = []
        for name, pc in zip(self.class_names, self.per_class):
            rows.append([experiment, name, pc["support"], "", pc["precision"], pc["recall"],
                         pc["f1"], pc["specificity"],
                         "" if pc.get("auc") is None else pc["auc"]])
        rows.append([experiment, "macro", sum(pc["support"] for pc in self.per_class),
                     self.accuracy, self.precision, self.recall, self.f1, self.specificity,
                     "" if self.auc is None else self.auc])
        return rows

    def to_csv(self, experiment: str = "eval") -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "class", "support", "accuracy", "precision", "recall",
                    "f1", "specificity", "auc"])
        w.writerows(self.csv_rows(experiment))
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred"] + list(self.class_names))
        for name, row in zip(self.class_names, self.confusion):
            w.writerow([name] + list(row))
        return buf.getvalue()


def metrics_report(true_labels, scores, class_names: Sequence[str]) -> MetricsReport:
    """Full report from per-sample class scores (argmax gives the prediction)."""
    scores = np.asarray(scores, dtype=np.float64)
    k = len(class_names)
    if len(scores) == 0:
        raise MetricsError("no samples to evaluate")
    pred = scores.argmax(axis=1)
    cm = confusion(true_labels, pred, k)
    sm = scalar_metrics(cm)
    flags = list(sm["flags"])
    try:
        auc, per_auc, auc_flags = roc_auc(scores, true_labels)
        flags += auc_flags
    except MetricsError:
        auc, per_auc = None, [None] * k
        flags.append("auc_undefined")
    per_class = [{**pc, "auc": a} for pc, a in zip(sm["per_class"], per_auc)]
    return MetricsReport(sm["accuracy"], sm["precision"], sm["recall"], sm["f1"],
                         sm["specificity"], auc, cm.tolist(), per_class, list(class_names),
                         flags)
