"""Confusion matrices, the five threshold metrics, ROC/AUC, and k-fold cross-validation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import data as D
from . import io as pltn
from .models import build_model, save_checkpoint
from .training import predict_scores, train

NA = "n/a"
METRICS = ("accuracy", "sensitivity", "specificity", "ppv", "npv")
ALL_METRICS = METRICS + ("auc",)


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(scores: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> ConfusionMatrix:
    """Positive prediction iff score >= threshold; positive class is label 1 (resistant)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise MetricError("scores and labels must be 1-d and of equal length")
    if s.size == 0:
        raise MetricError("cannot build a confusion matrix from no samples")
    pred = s >= threshold
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def _ratio(num: int, den: int):
    return num / den if den else NA


@dataclass
class MetricSet:
    """Metric values; a zero-denominator metric holds the string ``"n/a"``."""

    accuracy: object
    sensitivity: object
    specificity: object
    ppv: object
    npv: object
    auc: object = NA

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ALL_METRICS}


def metrics(cm: ConfusionMatrix) -> MetricSet:
    if cm.total <= 0:
        raise MetricError("empty confusion matrix")
    return MetricSet(
        accuracy=(cm.tp + cm.tn) / cm.total,
        sensitivity=_ratio(cm.tp, cm.tp + cm.fn),
        specificity=_ratio(cm.tn, cm.tn + cm.fp),
        ppv=_ratio(cm.tp, cm.tp + cm.fp),
        npv=_ratio(cm.tn, cm.tn + cm.fn),
    )


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr.tolist(), self.tpr.tolist()))


def roc(scores: Sequence[float], labels: Sequence[int]) -> RocCurve:
    """ROC over every distinct score (descending) preceded by a +inf threshold."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC needs both classes present")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tps = np.cumsum(y == 1)[ends]
    fps = np.cumsum(y == 0)[ends]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thr = np.r_[np.inf, s[ends]]
    keep = np.r_[True, (np.diff(fpr) != 0) | (np.diff(tpr) != 0)]
    return RocCurve(fpr[keep], tpr[keep], thr[keep])


def auc(curve_or_scores, labels: Optional[Sequence[int]] = None) -> float:
    """Trapezoidal area under an ROC curve (or under the ROC of scores/labels)."""
    curve = curve_or_scores if isinstance(curve_or_scores, RocCurve) else roc(curve_or_scores, labels)
    return float(np.sum(np.diff(curve.fpr) * (curve.tpr[1:] + curve.tpr[:-1]) / 2.0))


def evaluate_scores(scores, labels, threshold: float = 0.5) -> MetricSet:
    m = metrics(confusion(scores, labels, threshold))
    try:
        m.auc = auc(scores, labels)
    except MetricError:
        m.auc = NA
    return m


def patient_level(scores, labels, patient_ids, threshold: float = 0.5) -> MetricSet:
    """Majority vote of slice predictions per patient (ties count as positive).

    The patient's AUC score is the mean slice score.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    pids = np.asarray(patient_ids)
    votes, truth, means = [], [], []
    for pid in sorted(set(pids.tolist())):
        m = pids == pid
        pos = np.sum(scores[m] >= threshold)
        votes.append(1.0 if 2 * pos >= m.sum() else 0.0)
        truth.append(int(labels[m][0]))
        means.append(float(scores[m].mean()))
    ms = metrics(confusion(votes, truth, 0.5))
    try:
        ms.auc = auc(means, truth)
    except MetricError:
        ms.auc = NA
    return ms


# ---------------------------------------------------------------------------
# cross-validation report


@dataclass
class FoldResult:
    fold: int
    image: MetricSet
    patient: MetricSet
    scores: np.ndarray
    labels: np.ndarray
    patient_ids: np.ndarray
    extra: dict = field(default_factory=dict)


def _numeric(values):
    return [v for v in values if not isinstance(v, str) and v is not None and not math.isnan(v)]


@dataclass
class CvReport:
    folds: list
    config: dict

    def summary(self, level: str = "image") -> dict:
        out = {}
        for k in ALL_METRICS:
            vals = _numeric([getattr(getattr(f, level), k) for f in self.folds])
            if vals:
                out[k] = {"mean": float(np.mean(vals)), "std": float(np.std(vals)),
                          "min": float(np.min(vals)), "max": float(np.max(vals))}
            else:
                out[k] = {"mean": NA, "std": NA, "min": NA, "max": NA}
        return out

    def mean(self, metric: str, level: str = "image"):
        return self.summary(level)[metric]["mean"]

    def to_json(self) -> str:
        doc = {
            "config": self.config,
            "folds": [
                {"fold": f.fold, "image": _round(f.image.as_dict()), "patient": _round(f.patient.as_dict()),
                 **({"extra": _round(f.extra)} if f.extra else {})}
                for f in self.folds
            ],
            "aggregate": {"image": _round(self.summary("image")), "patient": _round(self.summary("patient"))},
            "canonical_level": "image",
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _round(obj):
    if isinstance(obj, dict):
        return {k: _round(v) for k, v in obj.items()}
    if isinstance(obj, float):
        return float(f"{obj:.6f}")
    return obj


def fmt(v) -> str:
    return NA if isinstance(v, str) else f"{v:.6f}"


def metrics_csv(m: MetricSet) -> str:
    return "metric,value\n" + "".join(f"{k},{fmt(v)}\n" for k, v in m.as_dict().items())


def roc_csv(curve: RocCurve) -> str:
    rows = ["threshold,fpr,tpr"]
    for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr):
        rows.append(f"{'inf' if np.isinf(t) else f'{t:.6f}'},{f:.6f},{p:.6f}")
    return "\n".join(rows) + "\n"


def cross_validate(records, model_cfg, train_cfg, k: int = 5, *, modality: str = "multimodal",
                   split_seed: int = 0, out_dir=None, log: Optional[Callable[[str], None]] = None,
                   folds: Optional[Sequence[int]] = None) -> CvReport:
    """Train and test one model per fold; image-level metrics are canonical.

    Minority slices are rotation-doubled before splitting; rotated copies stay
    with their patient. When ``out_dir`` is given, each fold writes its
    history, metrics, ROC and checkpoint under ``fold<f>/``.
    """
    balanced = D.balance_minority(records)
    plan = D.make_split(balanced, k, split_seed)
    size = model_cfg.input_size
    if out_dir is not None:
        pltn.atomic_write_text(Path(out_dir) / "split.json", plan.to_json())
    results = []
    for f in (range(k) if folds is None else folds):
        try:
            tr, va, te = plan.subsets(f)
            Xtr, ytr, _ = D.to_arrays(balanced, tr, size, modality)
            Xva, yva, _ = D.to_arrays(balanced, va, size, modality)
            Xte, yte, pte = D.to_arrays(balanced, te, size, modality)
            aug = D.Augmenter(D.Normalizer.fit(Xtr))
            model = build_model(model_cfg, train_cfg.seed + f)
            _, hist = train(model, (Xtr, ytr), (Xva, yva), replace(train_cfg, seed=train_cfg.seed + f), aug, log=log)
            scores = predict_scores(model, Xte, aug)
            image = evaluate_scores(scores, yte)
            patient = patient_level(scores, yte, pte)
        except Exception as exc:
            raise RuntimeError(f"fold {f} failed: {exc}") from exc
        results.append(FoldResult(f, image, patient, scores, yte, pte,
                                  {"best_epoch": hist.best_epoch, "epochs_run": len(hist.val_loss)}))
        if log is not None:
            log(f"fold {f}: auc {fmt(image.auc)} acc {fmt(image.accuracy)}")
        if out_dir is not None:
            fd = Path(out_dir) / f"fold{f}"
            pltn.atomic_write_text(fd / "history.csv", hist.to_csv())
            pltn.atomic_write_text(fd / "metrics.csv", metrics_csv(image))
            pltn.atomic_write_text(fd / "patient_metrics.csv", metrics_csv(patient))
            try:
                pltn.atomic_write_text(fd / "roc.csv", roc_csv(roc(scores, yte)))
            except MetricError:
                pass
            save_checkpoint(model, fd / "checkpoint")
    config = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "k_folds": k,
              "modality": modality, "split_seed": split_seed}
    return CvReport(results, config)
