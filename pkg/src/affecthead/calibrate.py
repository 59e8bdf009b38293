"""Post-hoc decision machinery: score blending, argmax decisions, grid
searches for the blend weight and the per-AU thresholds, and full
evaluation runs producing EvalReports.

All grid searches walk the grid in ascending order and keep the first
strict maximum, so ties resolve to the smallest grid value. Grid points
are computed as k / num_steps (the double closest to the exact decimal),
never by accumulating the step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import net
from .featstore import Dataset, task_features, task_view
from .metrics import (AU_NAMES, EXPR_CLASSES_LSD, EXPR_CLASSES_MTL,
                      ConfusionMatrix, EvalReport, aggregate_report,
                      binary_f1_per_au, ccc, confusion, macro_f1)
from .training import HeadBundle


def _grid(num_steps: int, include_ends: bool) -> list[float]:
    ks = range(0, num_steps + 1) if include_ends else range(1, num_steps)
    return [k / num_steps for k in ks]


def _num_steps(grid_step: float) -> int:
    if not 0.0 < grid_step < 1.0:
        raise ValueError(f"grid_step must be in (0, 1), got {grid_step}")
    num = round(1.0 / grid_step)
    if abs(num * grid_step - 1.0) > 1e-9:
        raise ValueError(f"grid_step {grid_step} does not divide 1 evenly")
    return num


def blend(w: float, s_pre, s_ft) -> np.ndarray:
    """Convex combination w * s_pre + (1 - w) * s_ft."""
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"blend weight must be in [0, 1], got {w}")
    s_pre = np.asarray(s_pre, dtype=np.float64)
    s_ft = np.asarray(s_ft, dtype=np.float64)
    if s_pre.shape != s_ft.shape:
        raise ValueError(f"score shape mismatch: {s_pre.shape} vs {s_ft.shape}")
    return w * s_pre + (1.0 - w) * s_ft


def decide(scores) -> np.ndarray:
    """Per-row argmax; ties go to the lowest class index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[1] < 1:
        raise ValueError(f"scores must be n x C with C >= 1, got {scores.shape}")
    if scores.size and not np.isfinite(scores).all():
        raise ValueError("non-finite score")
    return np.argmax(scores, axis=1)


def search_blend_weight(s_pre, s_ft, labels, grid_step: float = 0.1) -> tuple[float, float]:
    """Exhaustive search of w in {0, step, ..., 1} maximizing the macro F1
    of the blended argmax decision; smallest maximizer wins."""
    s_pre = np.asarray(s_pre, dtype=np.float64)
    s_ft = np.asarray(s_ft, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if s_pre.shape != s_ft.shape or s_pre.ndim != 2:
        raise ValueError(f"score shape mismatch: {s_pre.shape} vs {s_ft.shape}")
    if s_pre.shape[0] == 0:
        raise ValueError("empty inputs")
    num_classes = s_pre.shape[1]
    best_w, best_f1 = 0.0, -np.inf
    for w in _grid(_num_steps(grid_step), include_ends=True):
        pred = decide(blend(w, s_pre, s_ft))
        f1 = macro_f1(labels, pred, num_classes)[0]
        if f1 > best_f1:
            best_w, best_f1 = w, f1
    return best_w, float(best_f1)


def search_au_thresholds(scores, true, grid_step: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Per-AU independent search over {step, ..., 1 - step} for the
    threshold maximizing that AU's binary F1; smallest maximizer wins.
    Returns (thresholds, per-AU F1 at those thresholds)."""
    scores = np.asarray(scores, dtype=np.float64)
    true = np.asarray(true)
    if scores.shape != true.shape or scores.ndim != 2:
        raise ValueError(f"shape mismatch: scores {scores.shape} vs true {true.shape}")
    n_aus = scores.shape[1]
    grid = _grid(_num_steps(grid_step), include_ends=False)
    thresholds = np.zeros(n_aus)
    best_f1 = np.full(n_aus, -np.inf)
    truth = true.astype(bool)
    for t in grid:
        pred = scores >= t
        for j in range(n_aus):
            tp = int(np.sum(pred[:, j] & truth[:, j]))
            fp = int(np.sum(pred[:, j] & ~truth[:, j]))
            fn = int(np.sum(~pred[:, j] & truth[:, j]))
            denom = 2 * tp + fp + fn
            f1 = 2.0 * tp / denom if denom else 0.0
            if f1 > best_f1[j]:
                best_f1[j] = f1
                thresholds[j] = t
    return thresholds, best_f1


@dataclass
class CalibrationProfile:
    """Blending weight and per-AU decision thresholds, all on the grid."""

    blend_weight: float = 1.0
    au_thresholds: np.ndarray = None  # type: ignore[assignment]
    grid_step: float = 0.1
    tuned_on: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.au_thresholds is None:
            self.au_thresholds = np.full(12, 0.5)
        self.au_thresholds = np.asarray(self.au_thresholds, dtype=np.float64)
        num = _num_steps(self.grid_step)
        grid = set(_grid(num, include_ends=True))
        if self.blend_weight not in grid:
            raise ValueError(f"blend_weight {self.blend_weight} not on the grid")
        inner = set(_grid(num, include_ends=False))
        for t in self.au_thresholds:
            if float(t) not in inner:
                raise ValueError(f"threshold {t} not on the grid")

    def to_dict(self) -> dict:
        return {
            "blend_weight": self.blend_weight,
            "au_thresholds": self.au_thresholds.tolist(),
            "grid_step": self.grid_step,
            "tuned_on": self.tuned_on,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "CalibrationProfile":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(blend_weight=doc["blend_weight"],
                   au_thresholds=np.asarray(doc["au_thresholds"], dtype=np.float64),
                   grid_step=doc["grid_step"],
                   tuned_on=doc.get("tuned_on"),
                   seed=doc.get("seed"))


def expression_scores(bundle: HeadBundle, ds: Dataset, indices: np.ndarray,
                      openface_model: Optional[net.HeadModel] = None,
                      blend_weight: float = 1.0) -> np.ndarray:
    """Softmax scores of the expression head, optionally blended with the
    auxiliary MLP's softmax scores. Rows without a descriptor keep the
    head's own scores."""
    scores = net.forward(bundle.expr_head, task_features(ds, "expr", indices))[-1]
    if openface_model is not None and ds.openface is not None:
        have = ds.openface_mask[indices]
        if have.any():
            rows = indices[have]
            aux = net.forward(openface_model, ds.openface[rows])[-1]
            mixed = blend(blend_weight, scores[have], aux)
            scores = scores.copy()
            scores[have] = mixed
    return scores


def evaluate_mtl(bundle: HeadBundle, ds: Dataset, profile: CalibrationProfile,
                 openface_blend: Optional[tuple[net.HeadModel, Optional[float]]] = None,
                 ) -> EvalReport:
    """Score every task on its labeled subset and aggregate.

    Tasks without labels (VA also when below 2 labeled rows) are reported
    as absent and excluded from the aggregate, which is then flagged
    partial.
    """
    num_classes = ds.manifest.num_expr_classes
    class_names = list(EXPR_CLASSES_MTL) if num_classes == 8 else (
        list(EXPR_CLASSES_LSD) if num_classes == 6 else
        [f"class{c}" for c in range(num_classes)])

    p_expr = None
    per_class = None
    cm = None
    expr_idx = task_view(ds, "expr").indices
    if expr_idx.size:
        aux_model, aux_w = (None, None)
        if openface_blend is not None:
            aux_model, aux_w = openface_blend
        w = profile.blend_weight if aux_w is None else aux_w
        scores = expression_scores(bundle, ds, expr_idx, aux_model, w)
        pred = decide(scores)
        true = ds.expr[expr_idx]
        p_expr, pc = macro_f1(true, pred, num_classes)
        per_class = pc.tolist()
        cm = confusion(true, pred, num_classes, class_names)

    p_va = None
    ccc_v = ccc_a = None
    va_idx = task_view(ds, "va").indices
    if va_idx.size >= 2:
        out = net.forward(bundle.va_head, task_features(ds, "va", va_idx))[-1]
        ccc_v = ccc(out[:, 0], ds.va[va_idx, 0])
        ccc_a = ccc(out[:, 1], ds.va[va_idx, 1])
        p_va = (ccc_v + ccc_a) / 2.0

    p_au = None
    per_au = None
    au_idx = task_view(ds, "au").indices
    if au_idx.size:
        scores = net.forward(bundle.au_head, task_features(ds, "au", au_idx))[-1]
        pa, p_au = binary_f1_per_au(ds.aus[au_idx], scores, profile.au_thresholds)
        per_au = pa.tolist()

    report = aggregate_report(p_va, p_expr, p_au)
    report.ccc_valence = ccc_v
    report.ccc_arousal = ccc_a
    report.per_class_f1 = per_class
    report.per_au_f1 = per_au
    report.expr_class_names = class_names
    report.au_thresholds = profile.au_thresholds.tolist()
    report.blend_weight = profile.blend_weight if openface_blend is not None else None
    report.task_counts = {"expr": int(expr_idx.size), "va": int(va_idx.size),
                          "au": int(au_idx.size)}
    report.expr_confusion = cm
    return report


@dataclass
class LsdResult:
    blend_weight: float
    f1: float
    f1_pre: float
    f1_ft: float
    per_class_f1: list[float]
    confusion_pre: ConfusionMatrix
    confusion_blend: ConfusionMatrix


def evaluate_lsd(s_pre, s_ft, labels, grid_step: float = 0.1) -> LsdResult:
    """Six-class ensemble evaluation: search the blend weight, then report
    macro F1 and confusion matrices for the first model alone and for the
    blended decision."""
    s_pre = np.asarray(s_pre, dtype=np.float64)
    s_ft = np.asarray(s_ft, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if s_pre.ndim != 2 or s_pre.shape[1] != 6:
        raise ValueError(f"expected n x 6 scores, got {s_pre.shape}")
    w, f1 = search_blend_weight(s_pre, s_ft, labels, grid_step)
    names = list(EXPR_CLASSES_LSD)
    pred_pre = decide(s_pre)
    pred_blend = decide(blend(w, s_pre, s_ft))
    f1_pre = macro_f1(labels, pred_pre, 6)[0]
    f1_ft = macro_f1(labels, decide(s_ft), 6)[0]
    _, per_class = macro_f1(labels, pred_blend, 6)
    return LsdResult(
        blend_weight=w, f1=f1, f1_pre=f1_pre, f1_ft=f1_ft,
        per_class_f1=per_class.tolist(),
        confusion_pre=confusion(labels, pred_pre, 6, names),
        confusion_blend=confusion(labels, pred_blend, 6, names),
    )


def write_predictions(path, ids, expr_pred, va_pred, au_pred) -> None:
    """Calibrated decisions per record: class index, the two continuous
    affect values, and the 12 AU bits."""
    header = ["id", "expression", "valence", "arousal"] + [n.lower() for n in AU_NAMES]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for i, rid in enumerate(ids):
            fields = [rid, str(int(expr_pred[i])),
                      format(float(va_pred[i, 0]), ".17g"),
                      format(float(va_pred[i, 1]), ".17g")]
            fields += [str(int(v)) for v in au_pred[i]]
            fh.write(",".join(fields) + "\n")
