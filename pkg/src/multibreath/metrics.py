"""ICBHI 2017 evaluation: 4x4 confusion matrix, specificity, sensitivity, score."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import CLASS_NAMES, classes_from_labels
from .errors import ShapeError, ValidationError

KEY_NAMES = ("normal", "crackle", "wheeze", "both")


@dataclass(frozen=True)
class MetricsReport:
    sp: float
    se: float
    score: float
    recall: tuple
    binary_se: float
    counts: np.ndarray

    def as_dict(self, digits: int | None = 4) -> dict:
        r = (lambda v: v) if digits is None else (lambda v: v if math.isnan(v) else round(v, digits))
        out = {"specificity": r(self.sp), "sensitivity": r(self.se), "score": r(self.score),
               "binary_sensitivity": r(self.binary_se), "total": int(self.counts.sum())}
        for name, v in zip(KEY_NAMES, self.recall):
            out[f"recall.{name}"] = r(v)
        for i, t in enumerate(KEY_NAMES):
            for j, p in enumerate(KEY_NAMES):
                out[f"confusion.{t}.{p}"] = int(self.counts[i, j])
        return out


def confusion(true_labels, pred_labels) -> np.ndarray:
    """Rows are true classes, columns predicted, in (Normal, Crackle, Wheeze, Both) order."""
    t = np.asarray(true_labels)
    p = np.asarray(pred_labels)
    if len(t) != len(p):
        raise ShapeError(f"confusion: {len(t)} true labels vs {len(p)} predictions")
    cm = np.zeros((4, 4), dtype=np.int64)
    if len(t):
        np.add.at(cm, (classes_from_labels(t), classes_from_labels(p)), 1)
    return cm


def confusion_from_classes(true_ids, pred_ids) -> np.ndarray:
    t = np.asarray(true_ids, dtype=np.int64)
    p = np.asarray(pred_ids, dtype=np.int64)
    if t.shape != p.shape:
        raise ShapeError(f"confusion: {t.shape} vs {p.shape}")
    cm = np.zeros((4, 4), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    return cm


def icbhi_metrics(cm) -> MetricsReport:
    """Sp = C_n / N_n, Se = sum of abnormal diagonal / abnormal rows, Score = their mean.

    A side with no samples is reported as NaN and the score is then NaN too.
    """
    cm = np.asarray(cm, dtype=np.int64)
    if cm.shape != (4, 4) or np.any(cm < 0):
        raise ValidationError(f"need a non-negative 4x4 matrix, got shape {cm.shape}")
    if cm.sum() == 0:
        raise ValidationError("empty confusion matrix")
    rows = cm.sum(axis=1)
    diag = np.diag(cm)
    n_abn = rows[1:].sum()
    sp = diag[0] / rows[0] if rows[0] else math.nan
    se = diag[1:].sum() / n_abn if n_abn else math.nan
    score = (sp + se) / 2
    recall = tuple(float(diag[i] / rows[i]) if rows[i] else math.nan for i in range(4))
    binary_se = float(cm[1:, 1:].sum() / n_abn) if n_abn else math.nan
    return MetricsReport(float(sp), float(se), float(score), recall, binary_se, cm.copy())


def format_metrics(report: MetricsReport, digits: int = 4) -> str:
    """Flat ``key = value`` document, one metric per line, stable key names."""
    lines = []
    for k, v in report.as_dict(digits).items():
        if isinstance(v, float):
            lines.append(f"{k} = {'nan' if math.isnan(v) else f'{v:.{digits}f}'}")
        else:
            lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"


def parse_metrics(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        k, _, v = line.partition("=")
        v = v.strip()
        try:
            out[k.strip()] = int(v)
        except ValueError:
            out[k.strip()] = float(v)
    return out


def class_name(class_id: int) -> str:
    return CLASS_NAMES[class_id]
