"""Loss functions and head-training protocols.

Two protocols over the frozen per-image features:

* ``separate`` - each head is trained only on the records that carry its
  label (no masks needed); expression uses class-weighted cross-entropy,
  valence/arousal the concordance loss, AUs sigmoid binary cross-entropy.
* ``simultaneous`` - one pass over all records per epoch; each batch
  updates every head on its labeled sub-rows via the composite loss plus
  the AU term, skipping heads with nothing to learn from in that batch.

Both protocols record per-epoch train loss and validation metric per task
and retain the best-validation-epoch parameters per head. Everything is
seeded and bit-reproducible.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import net
from .featstore import Dataset, DatasetError, task_features, task_view
from .metrics import binary_f1_per_au, ccc, macro_f1

DEFAULT_THRESHOLDS_05 = np.full(12, 0.5)

HISTORY_COLUMNS = ("epoch", "expr_loss", "va_loss", "au_loss",
                   "expr_val_f1", "va_val_ccc", "au_val_f1")

_SELECTION_DEFAULTS = {"expr": "macro_f1", "va": "mean_ccc", "au": "macro_f1_at_05"}


@dataclass(frozen=True)
class ClassWeights:
    """Per-class loss weights max_k(N_k) / N_c."""

    weights: np.ndarray


def class_weights(counts) -> ClassWeights:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a non-empty vector")
    if (counts < 1).any():
        bad = int(np.flatnonzero(counts < 1)[0])
        raise ValueError(f"class {bad} has no training examples; drop or merge it")
    return ClassWeights(weights=counts.max() / counts.astype(np.float64))


def weighted_ce(logits, labels, w: ClassWeights) -> tuple[float, np.ndarray]:
    """Class-weighted softmax cross-entropy, mean over samples.

    Returns the loss and its gradient w.r.t. the logits (softmax fused).
    """
    z = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ValueError(f"bad shapes: logits {z.shape}, labels {labels.shape}")
    n, n_classes = z.shape
    if n == 0:
        raise ValueError("empty batch")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels out of range [0, {n_classes})")
    zs = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(zs).sum(axis=1, keepdims=True))
    logp = zs - lse
    rows = np.arange(n)
    wi = w.weights[labels]
    loss = float((-logp[rows, labels] * wi).mean())
    grad = np.exp(logp) * wi[:, None]
    grad[rows, labels] -= wi
    grad /= n
    return loss, grad


def ccc_loss(pred_va, true_va) -> tuple[float, np.ndarray]:
    """1 - 0.5 * (CCC over valence column + CCC over arousal column),
    computed with the batch's own moments; analytic gradient w.r.t. the
    predictions. A column with a degenerate denominator contributes
    CCC = 0 and a zero gradient.
    """
    pred = np.asarray(pred_va, dtype=np.float64)
    true = np.asarray(true_va, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 2:
        raise ValueError(f"shape mismatch: {pred.shape} vs {true.shape}")
    n = pred.shape[0]
    if n < 2:
        raise ValueError(f"concordance needs at least 2 samples, got {n}")
    grad = np.zeros_like(pred)
    total = 0.0
    for j in range(pred.shape[1]):
        x = pred[:, j]
        y = true[:, j]
        mx, my = x.mean(), y.mean()
        dx, dy = x - mx, y - my
        vx = (dx ** 2).mean()
        vy = (dy ** 2).mean()
        cov = (dx * dy).mean()
        denom = vx + vy + (mx - my) ** 2
        if denom < 1e-12:
            continue
        total += 2.0 * cov / denom
        d_num = 2.0 * dy / n
        d_den = 2.0 * dx / n + 2.0 * (mx - my) / n
        dccc = (d_num * denom - 2.0 * cov * d_den) / denom ** 2
        grad[:, j] = -0.5 * dccc
    return 1.0 - 0.5 * total, grad


def bce_loss(logits, targets) -> tuple[float, np.ndarray]:
    """Sigmoid binary cross-entropy in the stable logit form, mean over
    every entry; gradient w.r.t. the logits (sigmoid fused)."""
    z = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets)
    if z.shape != t.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {t.shape}")
    if z.size == 0:
        raise ValueError("empty batch")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("targets must be 0 or 1")
    t = t.astype(np.float64)
    loss = float((np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean())
    grad = (net.sigmoid(z) - t) / z.size
    return loss, grad


def composite_mt_loss(expr_logits, va_pred, expr_labels, va_true,
                      w: ClassWeights) -> tuple[float, np.ndarray, np.ndarray]:
    """Concordance term over the VA-labeled rows plus weighted
    cross-entropy over the expression-labeled rows.

    ``expr_labels`` uses -1 for missing, ``va_true`` NaN. A term is
    omitted when its subset is empty (or below 2 rows for VA). Returns
    ``(loss, grad_expr_logits, grad_va_pred)`` with zero gradients on
    unlabeled rows. Raises when no term is usable.
    """
    z = np.asarray(expr_logits, dtype=np.float64)
    va = np.asarray(va_pred, dtype=np.float64)
    expr_labels = np.asarray(expr_labels, dtype=np.int64)
    va_true = np.asarray(va_true, dtype=np.float64)
    expr_rows = np.flatnonzero(expr_labels >= 0)
    va_rows = np.flatnonzero(~np.isnan(va_true[:, 0]))
    grad_expr = np.zeros_like(z)
    grad_va = np.zeros_like(va)
    loss = 0.0
    usable = False
    if va_rows.size >= 2:
        va_term, g = ccc_loss(va[va_rows], va_true[va_rows])
        loss += va_term
        grad_va[va_rows] = g
        usable = True
    if expr_rows.size >= 1:
        ce_term, g = weighted_ce(z[expr_rows], expr_labels[expr_rows], w)
        loss += ce_term
        grad_expr[expr_rows] = g
        usable = True
    if not usable:
        raise ValueError("batch has no usable labels")
    return loss, grad_expr, grad_va


# --- configuration and bundle -----------------------------------------------

@dataclass
class TrainConfig:
    protocol: str = "separate"
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.001
    optimizer: str = "adam"  # "adam" | "adam_sam"
    rho: float = 0.05
    seed: int = 0
    selection: dict = field(default_factory=lambda: dict(_SELECTION_DEFAULTS))

    def validated(self, va_bearing: bool = True) -> "TrainConfig":
        if self.protocol not in ("separate", "simultaneous"):
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or (va_bearing and self.batch_size < 2):
            raise ValueError("batch_size must be >= 2 when training valence/arousal")
        if self.optimizer not in ("adam", "adam_sam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        for task, metric in self.selection.items():
            if metric != _SELECTION_DEFAULTS.get(task):
                raise ValueError(f"unsupported selection metric {metric!r} for {task!r}")
        return self


@dataclass
class HeadBundle:
    expr_head: net.HeadModel
    va_head: net.HeadModel
    au_head: net.HeadModel
    openface_mlp: Optional[net.HeadModel] = None


def _head_seed(seed: int, offset: int) -> int:
    return seed * 10 + offset


def build_heads(feature_dim: int, num_expr_classes: int, seed: int) -> HeadBundle:
    concat_dim = feature_dim + 10
    return HeadBundle(
        expr_head=net.init_model([net.LayerSpec(concat_dim, num_expr_classes, "softmax")],
                                 _head_seed(seed, 1)),
        va_head=net.init_model([net.LayerSpec(10, 2, "tanh")], _head_seed(seed, 2)),
        au_head=net.init_model([net.LayerSpec(concat_dim, 12, "sigmoid")],
                               _head_seed(seed, 3)),
    )


def build_openface_mlp(num_expr_classes: int, seed: int) -> net.HeadModel:
    return net.init_model(
        [net.LayerSpec(35, 128, "relu"), net.LayerSpec(128, num_expr_classes, "softmax")],
        _head_seed(seed, 4))


# --- per-head plumbing --------------------------------------------------

def _ce_grad_fn(X: np.ndarray, y: np.ndarray, w: ClassWeights):
    def fn(model: net.HeadModel, idx) -> tuple[float, list[np.ndarray]]:
        acts = net.forward(model, X[idx])
        z = net.final_preactivation(model, acts)
        loss, dz = weighted_ce(z, y[idx], w)
        wg, bg, _ = net.backward(model, acts, dz, at_preactivation=True)
        return loss, net.flatten_grads(wg, bg)
    return fn


def _ccc_grad_fn(X: np.ndarray, y: np.ndarray):
    def fn(model: net.HeadModel, idx) -> tuple[float, list[np.ndarray]]:
        acts = net.forward(model, X[idx])
        loss, dout = ccc_loss(acts[-1], y[idx])
        wg, bg, _ = net.backward(model, acts, dout)
        return loss, net.flatten_grads(wg, bg)
    return fn


def _bce_grad_fn(X: np.ndarray, y: np.ndarray):
    def fn(model: net.HeadModel, idx) -> tuple[float, list[np.ndarray]]:
        acts = net.forward(model, X[idx])
        z = net.final_preactivation(model, acts)
        loss, dz = bce_loss(z, y[idx])
        wg, bg, _ = net.backward(model, acts, dz, at_preactivation=True)
        return loss, net.flatten_grads(wg, bg)
    return fn


def _step(model: net.HeadModel, opt: net.OptimizerState, grad_fn, idx) -> float:
    if opt.kind == "adam_sam":
        _, _, loss = net.sam_step(opt, model, idx, grad_fn)
        return loss
    loss, grads = grad_fn(model, idx)
    net.adam_step(opt, model.params(), grads)
    return loss


def _train_one_head(model: net.HeadModel, grad_fn, n_rows: int, cfg: TrainConfig,
                    val_fn: Callable[[net.HeadModel], float], rng: np.random.Generator,
                    drop_tiny_batches: bool) -> tuple[list[float], list[float]]:
    """Epoch loop for a single head; restores the best-validation epoch's
    parameters in place. Returns (epoch losses, epoch validation metrics)."""
    opt = net.init_optimizer(model.params(), kind=cfg.optimizer,
                             learning_rate=cfg.learning_rate, rho=cfg.rho)
    best_val = -np.inf
    best_params = model.copy_params()
    losses: list[float] = []
    vals: list[float] = []
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_rows)
        total, count = 0.0, 0
        for start in range(0, n_rows, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if drop_tiny_batches and idx.size < 2:
                continue
            loss = _step(model, opt, grad_fn, idx)
            total += loss * idx.size
            count += idx.size
        losses.append(total / count if count else np.nan)
        val = val_fn(model)
        vals.append(val)
        if val > best_val:
            best_val = val
            best_params = model.copy_params()
    model.set_params(best_params)
    return losses, vals


def _expr_val_fn(X: np.ndarray, y: np.ndarray, num_classes: int):
    def fn(model: net.HeadModel) -> float:
        probs = net.forward(model, X)[-1]
        pred = np.argmax(probs, axis=1)
        return macro_f1(y, pred, num_classes)[0]
    return fn


def _va_val_fn(X: np.ndarray, y: np.ndarray):
    def fn(model: net.HeadModel) -> float:
        out = net.forward(model, X)[-1]
        return 0.5 * (ccc(out[:, 0], y[:, 0]) + ccc(out[:, 1], y[:, 1]))
    return fn


def _au_val_fn(X: np.ndarray, y: np.ndarray):
    def fn(model: net.HeadModel) -> float:
        scores = net.forward(model, X)[-1]
        return binary_f1_per_au(y, scores, DEFAULT_THRESHOLDS_05)[1]
    return fn


def _task_arrays(ds: Dataset, task: str) -> tuple[np.ndarray, np.ndarray]:
    view = task_view(ds, task)
    X = task_features(ds, task, view.indices)
    if task in ("expr", "expr_openface"):
        y = ds.expr[view.indices]
    elif task == "va":
        y = ds.va[view.indices]
    else:
        y = ds.aus[view.indices]
    return X, y


# --- protocols ----------------------------------------------------------

def train_heads(train: Dataset, val: Dataset, cfg: TrainConfig) -> tuple[HeadBundle, list[dict]]:
    """Train the three heads with the configured protocol.

    Returns the bundle (best-validation parameters per head) and the
    history: one dict per epoch with per-task train loss and validation
    metric (see HISTORY_COLUMNS).
    """
    cfg = cfg.validated(va_bearing=True)
    if train.manifest.num_expr_classes != val.manifest.num_expr_classes:
        raise DatasetError("train/val class count mismatch")
    if train.manifest.feature_dim != val.manifest.feature_dim:
        raise DatasetError("train/val feature_dim mismatch")
    num_classes = train.manifest.num_expr_classes

    Xe, ye = _task_arrays(train, "expr")
    Xv, yv = _task_arrays(train, "va")
    Xa, ya = _task_arrays(train, "au")
    for task, X in (("expr", Xe), ("va", Xv), ("au", Xa)):
        if len(X) == 0:
            raise DatasetError(f"training set has no {task!r} labels")
    if len(Xv) < 2:
        raise DatasetError("valence/arousal training needs at least 2 labeled records")

    vXe, vye = _task_arrays(val, "expr")
    vXv, vyv = _task_arrays(val, "va")
    vXa, vya = _task_arrays(val, "au")
    for task, X, minimum in (("expr", vXe, 1), ("va", vXv, 2), ("au", vXa, 1)):
        if len(X) < minimum:
            raise DatasetError(f"validation set has too few {task!r} labels")

    w = class_weights(np.bincount(ye, minlength=num_classes))
    bundle = build_heads(train.manifest.feature_dim, num_classes, cfg.seed)
    val_fns = {
        "expr": _expr_val_fn(vXe, vye, num_classes),
        "va": _va_val_fn(vXv, vyv),
        "au": _au_val_fn(vXa, vya),
    }

    if cfg.protocol == "separate":
        expr_losses, expr_vals = _train_one_head(
            bundle.expr_head, _ce_grad_fn(Xe, ye, w), len(Xe), cfg,
            val_fns["expr"], np.random.default_rng(_head_seed(cfg.seed, 5)),
            drop_tiny_batches=False)
        va_losses, va_vals = _train_one_head(
            bundle.va_head, _ccc_grad_fn(Xv, yv), len(Xv), cfg,
            val_fns["va"], np.random.default_rng(_head_seed(cfg.seed, 6)),
            drop_tiny_batches=True)
        au_losses, au_vals = _train_one_head(
            bundle.au_head, _bce_grad_fn(Xa, ya), len(Xa), cfg,
            val_fns["au"], np.random.default_rng(_head_seed(cfg.seed, 7)),
            drop_tiny_batches=False)
    else:
        expr_losses, va_losses, au_losses, expr_vals, va_vals, au_vals = \
            _train_simultaneous(bundle, train, w, cfg, val_fns)

    history = [
        {"epoch": e + 1,
         "expr_loss": expr_losses[e], "va_loss": va_losses[e], "au_loss": au_losses[e],
         "expr_val_f1": expr_vals[e], "va_val_ccc": va_vals[e], "au_val_f1": au_vals[e]}
        for e in range(cfg.epochs)
    ]
    return bundle, history


def _train_simultaneous(bundle: HeadBundle, train: Dataset, w: ClassWeights,
                        cfg: TrainConfig, val_fns: dict):
    n = len(train)
    Xe = task_features(train, "expr")
    Xv = task_features(train, "va")
    Xa = task_features(train, "au")
    au_ok = train.au_mask

    opts = {
        "expr": net.init_optimizer(bundle.expr_head.params(), cfg.optimizer,
                                   cfg.learning_rate, cfg.rho),
        "va": net.init_optimizer(bundle.va_head.params(), cfg.optimizer,
                                 cfg.learning_rate, cfg.rho),
        "au": net.init_optimizer(bundle.au_head.params(), cfg.optimizer,
                                 cfg.learning_rate, cfg.rho),
    }
    heads = {"expr": bundle.expr_head, "va": bundle.va_head, "au": bundle.au_head}
    best = {t: (-np.inf, heads[t].copy_params()) for t in heads}
    losses: dict[str, list[float]] = {t: [] for t in heads}
    vals: dict[str, list[float]] = {t: [] for t in heads}
    rng = np.random.default_rng(_head_seed(cfg.seed, 9))

    def expr_fn(idx):
        rows = idx[train.expr[idx] >= 0]
        if rows.size == 0:
            return None
        return _ce_grad_fn(Xe, train.expr, w), rows

    def va_fn(idx):
        rows = idx[train.va_mask[idx]]
        if rows.size < 2:
            return None
        return _ccc_grad_fn(Xv, train.va), rows

    def au_fn(idx):
        rows = idx[au_ok[idx]]
        if rows.size == 0:
            return None
        return _bce_grad_fn(Xa, train.aus), rows

    subsets = {"expr": expr_fn, "va": va_fn, "au": au_fn}

    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        totals = {t: 0.0 for t in heads}
        counts = {t: 0 for t in heads}
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            for task in ("expr", "va", "au"):
                picked = subsets[task](idx)
                if picked is None:
                    continue
                grad_fn, rows = picked
                loss = _step(heads[task], opts[task], grad_fn, rows)
                totals[task] += loss * rows.size
                counts[task] += rows.size
        for task in heads:
            losses[task].append(totals[task] / counts[task] if counts[task] else np.nan)
            v = val_fns[task](heads[task])
            vals[task].append(v)
            if v > best[task][0]:
                best[task] = (v, heads[task].copy_params())
    for task in heads:
        heads[task].set_params(best[task][1])
    return (losses["expr"], losses["va"], losses["au"],
            vals["expr"], vals["va"], vals["au"])


def train_openface_mlp(train: Dataset, val: Dataset,
                       cfg: TrainConfig) -> tuple[net.HeadModel, list[dict]]:
    """Train the 35 -> 128 (relu) -> C (softmax) auxiliary expression MLP
    on the records that have both an expression label and the descriptor."""
    cfg = replace(cfg).validated(va_bearing=False)
    for name, ds in (("training", train), ("validation", val)):
        if ds.openface is None:
            raise DatasetError(f"{name} set has no openface descriptors")
    Xt, yt = _task_arrays(train, "expr_openface")
    Xv, yv = _task_arrays(val, "expr_openface")
    if len(Xt) == 0 or len(Xv) == 0:
        raise DatasetError("empty expr_openface view")
    num_classes = train.manifest.num_expr_classes
    w = class_weights(np.bincount(yt, minlength=num_classes))
    model = build_openface_mlp(num_classes, cfg.seed)
    losses, vals = _train_one_head(
        model, _ce_grad_fn(Xt, yt, w), len(Xt), cfg,
        _expr_val_fn(Xv, yv, num_classes),
        np.random.default_rng(_head_seed(cfg.seed, 8)),
        drop_tiny_batches=False)
    history = [{"epoch": e + 1, "loss": losses[e], "val_f1": vals[e]}
               for e in range(cfg.epochs)]
    return model, history


# --- artifacts ----------------------------------------------------------

def write_history_csv(history: list[dict], path) -> None:
    if not history:
        raise ValueError("empty history")
    columns = list(history[0].keys())
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in history:
            writer.writerow([row["epoch"]] + [format(float(row[c]), ".17g")
                                              for c in columns[1:]])


BUNDLE_FILES = {
    "expr": "expr_head.json",
    "va": "va_head.json",
    "au": "au_head.json",
    "openface": "openface_mlp.json",
}


def save_bundle(bundle: HeadBundle, out_dir) -> None:
    import os
    os.makedirs(out_dir, exist_ok=True)
    net.save_model(bundle.expr_head, os.path.join(out_dir, BUNDLE_FILES["expr"]))
    net.save_model(bundle.va_head, os.path.join(out_dir, BUNDLE_FILES["va"]))
    net.save_model(bundle.au_head, os.path.join(out_dir, BUNDLE_FILES["au"]))
    if bundle.openface_mlp is not None:
        net.save_model(bundle.openface_mlp, os.path.join(out_dir, BUNDLE_FILES["openface"]))


def load_bundle(ckpt_dir) -> HeadBundle:
    import os
    def _load(name):
        return net.load_model(os.path.join(ckpt_dir, name))[0]
    openface_path = os.path.join(ckpt_dir, BUNDLE_FILES["openface"])
    return HeadBundle(
        expr_head=_load(BUNDLE_FILES["expr"]),
        va_head=_load(BUNDLE_FILES["va"]),
        au_head=_load(BUNDLE_FILES["au"]),
        openface_mlp=net.load_model(openface_path)[0] if os.path.exists(openface_path) else None,
    )
