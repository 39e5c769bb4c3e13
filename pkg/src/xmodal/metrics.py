"""Accuracy / macro-F1 for classification; RMSE / PCC / CCC for regression.

Moments use the population (1/N) convention. Correlations that are
undefined because of zero variance come back as ``nan`` with the matching
``*_defined`` flag set to False.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np


@dataclass
class ClassificationReport:
    accuracy: float
    macro_f1: float
    per_class_f1: list
    absent_classes: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class RegressionReport:
    rmse: float
    pcc: float
    ccc: float
    pcc_defined: bool = True
    ccc_defined: bool = True

    def to_json(self) -> str:
        d = {k: (None if isinstance(v, float) and math.isnan(v) else v)
             for k, v in asdict(self).items()}
        return json.dumps(d, sort_keys=True)


def classification_report(pred, truth, classes: int) -> ClassificationReport:
    pred = np.asarray(pred, dtype=int).ravel()
    truth = np.asarray(truth, dtype=int).ravel()
    if pred.shape != truth.shape or pred.size < 1:
        raise ValueError("pred and truth must be equal-length and nonempty")
    for name, arr in (("pred", pred), ("truth", truth)):
        if arr.min() < 0 or arr.max() >= classes:
            raise ValueError(f"{name} has class index outside [0, {classes})")
    confusion = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(confusion, (truth, pred), 1)
    tp = np.diag(confusion).astype(float)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros(classes), where=denom > 0)
    absent = [int(j) for j in np.flatnonzero(denom == 0)]
    return ClassificationReport(
        accuracy=float(tp.sum() / pred.size),
        macro_f1=float(f1.mean()),
        per_class_f1=[float(v) for v in f1],
        absent_classes=absent,
    )


def _moments(pred, truth):
    mp, mt = pred.mean(), truth.mean()
    dp, dt = pred - mp, truth - mt
    return mp, mt, np.mean(dp * dp), np.mean(dt * dt), np.mean(dp * dt)


def concordance(pred, truth) -> float:
    """Lin's concordance correlation; ``nan`` when both inputs are the same constant."""
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    mp, mt, vp, vt, cov = _moments(pred, truth)
    denom = vp + vt + (mp - mt) ** 2
    return float(np.clip(2 * cov / denom, -1.0, 1.0)) if denom > 0 else math.nan


def regression_report(pred, truth) -> RegressionReport:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"length mismatch: {pred.size} vs {truth.size}")
    if pred.size < 2:
        raise ValueError("regression_report needs at least 2 samples")
    rmse = float(np.sqrt(np.mean((pred - truth) ** 2)))
    _, _, vp, vt, cov = _moments(pred, truth)
    pcc_ok = bool(vp > 0 and vt > 0)
    pcc = float(np.clip(cov / np.sqrt(vp * vt), -1.0, 1.0)) if pcc_ok else math.nan
    ccc = concordance(pred, truth)
    return RegressionReport(rmse, pcc, ccc, pcc_defined=pcc_ok, ccc_defined=not math.isnan(ccc))
