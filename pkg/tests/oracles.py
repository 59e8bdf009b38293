"""Independent reference implementations used to cross-check the library.

Everything here is deliberately written with different machinery than the
code under test: plain Python loops for the concordance formula, sklearn
for F1, and brute-force loops for the grid searches.
"""

from __future__ import annotations

import numpy as np
from sklearn.metrics import f1_score


def ccc_reference(x, y) -> float:
    """Concordance formula evaluated with plain Python arithmetic."""
    x = [float(v) for v in x]
    y = [float(v) for v in y]
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    vx = sum((v - mx) ** 2 for v in x) / n
    vy = sum((v - my) ** 2 for v in y) / n
    cov = sum((a - mx) * (b - my) for a, b in zip(x, y)) / n
    denom = vx + vy + (mx - my) ** 2
    if denom < 1e-12:
        return 0.0
    return 2.0 * cov / denom


def sklearn_macro_f1(true, pred, num_classes: int) -> float:
    return float(f1_score(true, pred, labels=list(range(num_classes)),
                          average="macro", zero_division=0))


def finite_diff(loss_fn, arrays, h: float = 1e-6) -> list[np.ndarray]:
    """Central-difference gradients of a scalar loss w.r.t. each array,
    perturbing one entry at a time in place."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor: float = 1e-4) -> float:
    """Worst-case relative error with a mixed-tolerance floor.

    The denominator is floored at 1e-4 so that near-zero entries are in
    effect compared absolutely at 1e-8, the precision central differences
    can deliver at h = 1e-6 in double precision (a pure relative error
    would reject even exact zero gradients, e.g. dead relu units, because
    the numeric side carries ~1e-9 roundoff noise).
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float((np.abs(a - n) / denom).max()))
    return worst


def _binary_f1(true_col, pred_col) -> float:
    """Single-division F1 (the shared convention: one correctly rounded
    quotient of exact integers, zero denominator scores 0)."""
    tp = fp = fn = 0
    for t, p in zip(true_col, pred_col):
        if p and t:
            tp += 1
        elif p and not t:
            fp += 1
        elif not p and t:
            fn += 1
    denom = 2 * tp + fp + fn
    return 2.0 * tp / denom if denom else 0.0


def reference_macro_f1(true, pred, num_classes: int) -> float:
    """Left-to-right mean of per-class single-division F1 values."""
    total = 0.0
    for c in range(num_classes):
        total += _binary_f1([t == c for t in true], [p == c for p in pred])
    return total / num_classes


def brute_force_blend_weight(s_pre, s_ft, labels, grid_step: float) -> tuple[float, float]:
    """Re-evaluates every grid point from scratch; first strict maximum wins."""
    num = round(1.0 / grid_step)
    num_classes = s_pre.shape[1]
    best_w, best_f1 = None, -1.0
    for k in range(num + 1):
        w = k / num
        mixed = w * s_pre + (1.0 - w) * s_ft
        pred = mixed.argmax(axis=1)
        f1 = reference_macro_f1(labels.tolist(), pred.tolist(), num_classes)
        if f1 > best_f1:
            best_w, best_f1 = w, f1
    return best_w, best_f1


def brute_force_au_thresholds(scores, true, grid_step: float) -> tuple[np.ndarray, np.ndarray]:
    num = round(1.0 / grid_step)
    n_aus = scores.shape[1]
    thresholds = np.zeros(n_aus)
    best = np.full(n_aus, -1.0)
    for j in range(n_aus):
        for k in range(1, num):
            t = k / num
            pred = [s >= t for s in scores[:, j]]
            f1 = _binary_f1(list(true[:, j]), pred)
            if f1 > best[j]:
                best[j] = f1
                thresholds[j] = t
    return thresholds, best
