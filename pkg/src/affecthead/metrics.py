"""Evaluation metrics: CCC, RMSE, macro/per-class F1, per-AU F1, confusion
matrices, and the challenge aggregate P_MTL = P_VA + P_EXPR + P_AU.

All functions are pure and operate on immutable inputs. Reductions keep a
fixed order so repeated runs are bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

EXPR_CLASSES_MTL = (
    "Neutral", "Anger", "Disgust", "Fear",
    "Happiness", "Sadness", "Surprise", "Other",
)
EXPR_CLASSES_LSD = ("Surprise", "Fear", "Disgust", "Anger", "Happiness", "Sadness")
AU_NAMES = (
    "AU1", "AU2", "AU4", "AU6", "AU7", "AU10",
    "AU12", "AU15", "AU23", "AU24", "AU25", "AU26",
)
NUM_AUS = len(AU_NAMES)

# Below this, the concordance denominator is treated as degenerate.
DEGENERATE_EPS = 1e-12


def ccc(x, y) -> float:
    """Concordance correlation between two sequences.

    Uses population (1/n) moments:
        2*cov(x, y) / (var(x) + var(y) + (mean(x) - mean(y))**2)

    Returns 0.0 when the denominator falls below ``DEGENERATE_EPS``
    (e.g. both sequences constant).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.shape != y.shape:
        raise ValueError(f"ccc expects equal-length 1-d sequences, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError(f"ccc needs at least 2 samples, got {x.size}")
    if not (np.isfinite(x).all() and np.isfinite(y).all()):
        raise ValueError("ccc inputs must be finite")
    mx = x.mean()
    my = y.mean()
    vx = ((x - mx) ** 2).mean()
    vy = ((y - my) ** 2).mean()
    cov = ((x - mx) * (y - my)).mean()
    denom = vx + vy + (mx - my) ** 2
    if denom < DEGENERATE_EPS:
        return 0.0
    return float(min(1.0, max(-1.0, 2.0 * cov / denom)))


def rmse(x, y) -> float:
    """Root mean squared error between two equal-length sequences."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"rmse shape mismatch: {x.shape} vs {y.shape}")
    if x.size == 0:
        raise ValueError("rmse of empty input")
    return float(np.sqrt(((x - y) ** 2).mean()))


def _f1_from_counts(tp: np.ndarray, fp: np.ndarray, fn: np.ndarray) -> np.ndarray:
    """Per-class F1 with the zero-denominator-is-zero convention.

    Computed as the single division 2*TP / (2*TP + FP + FN): one correctly
    rounded quotient of exact integers, so mathematically equal F1 values
    are bit-equal no matter which counts produced them (grid-search
    tie-breaking depends on this).
    """
    denom = 2 * tp + fp + fn
    with np.errstate(invalid="ignore", divide="ignore"):
        f1 = np.where(denom > 0, 2.0 * tp / np.where(denom > 0, denom, 1), 0.0)
    return f1


def _lr_mean(values) -> float:
    """Left-to-right accumulation; the pinned reduction order for macros."""
    total = 0.0
    for v in values:
        total += float(v)
    return total / len(values)


def _check_classes(true, pred, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    true = np.asarray(true, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if true.shape != pred.shape or true.ndim != 1:
        raise ValueError(f"class sequences must match, got {true.shape} and {pred.shape}")
    for name, arr in (("true", true), ("pred", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels out of range [0, {num_classes})")
    return true, pred


def macro_f1(true, pred, num_classes: int) -> tuple[float, np.ndarray]:
    """Macro-averaged F1 over all ``num_classes`` classes.

    Classes absent from both ``true`` and ``pred`` score 0 and still count
    toward the unweighted mean. Returns ``(macro, per_class)``.
    """
    true, pred = _check_classes(true, pred, num_classes)
    tp = np.zeros(num_classes, dtype=np.int64)
    fp = np.zeros(num_classes, dtype=np.int64)
    fn = np.zeros(num_classes, dtype=np.int64)
    for c in range(num_classes):
        tp[c] = int(np.sum((pred == c) & (true == c)))
        fp[c] = int(np.sum((pred == c) & (true != c)))
        fn[c] = int(np.sum((pred != c) & (true == c)))
    per_class = _f1_from_counts(tp, fp, fn)
    return _lr_mean(per_class), per_class


def binary_f1_per_au(true, scores, thresholds) -> tuple[np.ndarray, float]:
    """Per-AU binary F1 at the given decision thresholds.

    A score >= threshold predicts presence. Returns ``(per_au, macro)``.
    """
    true = np.asarray(true)
    scores = np.asarray(scores, dtype=np.float64)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if true.shape != scores.shape or true.ndim != 2:
        raise ValueError(f"shape mismatch: true {true.shape} vs scores {scores.shape}")
    if thresholds.shape != (true.shape[1],):
        raise ValueError(f"expected {true.shape[1]} thresholds, got {thresholds.shape}")
    if np.any(thresholds <= 0.0) or np.any(thresholds >= 1.0):
        raise ValueError("thresholds must lie strictly inside (0, 1)")
    pred = scores >= thresholds[None, :]
    truth = true.astype(bool)
    tp = np.sum(pred & truth, axis=0)
    fp = np.sum(pred & ~truth, axis=0)
    fn = np.sum(~pred & truth, axis=0)
    per_au = _f1_from_counts(tp, fp, fn)
    return per_au, _lr_mean(per_au)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Row = true class, column = predicted class."""

    counts: np.ndarray
    class_names: tuple[str, ...]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def to_csv(self, path) -> None:
        """Write counts with a header row of class names."""
        lines = [",".join(self.class_names)]
        for row in self.counts:
            lines.append(",".join(str(int(v)) for v in row))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")


def confusion(true, pred, num_classes: int,
              class_names: Optional[Sequence[str]] = None) -> ConfusionMatrix:
    """Confusion matrix: counts[r][c] = #{i : true_i = r, pred_i = c}."""
    true, pred = _check_classes(true, pred, num_classes)
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (true, pred), 1)
    if class_names is None:
        class_names = tuple(f"class{c}" for c in range(num_classes))
    elif len(class_names) != num_classes:
        raise ValueError(f"expected {num_classes} class names, got {len(class_names)}")
    return ConfusionMatrix(counts=counts, class_names=tuple(class_names))


@dataclass
class MtlScores:
    """Challenge aggregate and its parts."""

    p_va: float
    p_expr: float
    p_au: float
    p_mtl: float
    ccc_valence: float
    ccc_arousal: float
    per_class_f1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    per_au_f1: np.ndarray = field(default_factory=lambda: np.zeros(0))


def mtl_score(ccc_v: float, ccc_a: float, p_expr: float, p_au: float) -> MtlScores:
    """Aggregate the three task metrics.

    ``p_va`` is the mean of the two CCCs and ``p_mtl = p_va + p_expr + p_au``,
    summed left to right in that order.
    """
    for name, v in (("ccc_v", ccc_v), ("ccc_a", ccc_a),
                    ("p_expr", p_expr), ("p_au", p_au)):
        if not np.isfinite(v):
            raise ValueError(f"{name} must be finite, got {v}")
    p_va = (ccc_v + ccc_a) / 2.0
    p_mtl = p_va + p_expr + p_au
    return MtlScores(p_va=p_va, p_expr=p_expr, p_au=p_au, p_mtl=p_mtl,
                     ccc_valence=ccc_v, ccc_arousal=ccc_a)


@dataclass
class EvalReport:
    """Full evaluation output; task metrics are None when the dataset has no
    labels for that task (the aggregate is then flagged partial)."""

    p_va: Optional[float]
    p_expr: Optional[float]
    p_au: Optional[float]
    p_mtl: float
    partial: bool
    ccc_valence: Optional[float] = None
    ccc_arousal: Optional[float] = None
    per_class_f1: Optional[list[float]] = None
    per_au_f1: Optional[list[float]] = None
    expr_class_names: Optional[list[str]] = None
    au_names: list[str] = field(default_factory=lambda: list(AU_NAMES))
    au_thresholds: Optional[list[float]] = None
    blend_weight: Optional[float] = None
    task_counts: dict = field(default_factory=dict)
    seed: Optional[int] = None
    expr_confusion: Optional[ConfusionMatrix] = None

    def to_dict(self) -> dict:
        d = {
            "p_va": self.p_va,
            "p_expr": self.p_expr,
            "p_au": self.p_au,
            "p_mtl": self.p_mtl,
            "partial": self.partial,
            "ccc_valence": self.ccc_valence,
            "ccc_arousal": self.ccc_arousal,
            "per_class_f1": self.per_class_f1,
            "per_au_f1": self.per_au_f1,
            "expr_class_names": self.expr_class_names,
            "au_names": list(self.au_names),
            "au_thresholds": self.au_thresholds,
            "blend_weight": self.blend_weight,
            "task_counts": self.task_counts,
            "seed": self.seed,
        }
        if self.expr_confusion is not None:
            d["expr_confusion"] = [[int(v) for v in row]
                                   for row in self.expr_confusion.counts]
        return d

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def aggregate_report(p_va: Optional[float], p_expr: Optional[float],
                     p_au: Optional[float]) -> EvalReport:
    """Sum whatever task metrics are present (order: VA, EXPR, AU)."""
    parts = [p for p in (p_va, p_expr, p_au) if p is not None]
    if not parts:
        raise ValueError("no task metrics to aggregate")
    p_mtl = parts[0]
    for p in parts[1:]:
        p_mtl = p_mtl + p
    return EvalReport(p_va=p_va, p_expr=p_expr, p_au=p_au, p_mtl=p_mtl,
                      partial=len(parts) < 3)
