"""Seeded synthetic datasets with known structure, used by the test suite
and by the `synth` CLI command to produce runnable demo data.

The generator plants learnable signal for every head: Gaussian class
clusters in the embedding space, near-one-hot expression logits, affect
values that are a fixed squashed linear map of the logits, AU bits from
linear score margins over the embedding, and class-keyed descriptor
patterns for the auxiliary MLP.
"""

from __future__ import annotations

import numpy as np

from .featstore import Dataset, make_dataset


def synthetic_mtl_dataset(n: int, seed: int, embedding_dim: int = 64,
                          num_expr_classes: int = 8, openface: bool = False,
                          expr_fraction: float = 1.0, va_fraction: float = 1.0,
                          au_fraction: float = 1.0,
                          id_prefix: str = "s") -> Dataset:
    """Build one synthetic dataset of ``n`` records.

    The class geometry (cluster centers, affect map, AU planes, descriptor
    patterns) depends only on the dimensions, so train and validation sets
    drawn with different seeds share the same planted structure; ``seed``
    drives the per-record sampling. Label fractions below 1 drop that
    task's label from a seeded random subset of records.
    """
    rng = np.random.default_rng([seed, 0xA11])
    struct = np.random.default_rng([0x5EED, embedding_dim, num_expr_classes])

    centers = struct.normal(0.0, 1.0, size=(num_expr_classes, embedding_dim))
    va_map = struct.normal(0.0, 0.6, size=(num_expr_classes, 2))
    au_planes = struct.normal(0.0, 1.0, size=(embedding_dim, 12))
    au_planes /= np.sqrt((au_planes ** 2).sum(axis=0, keepdims=True))
    of_patterns = struct.integers(0, 2, size=(num_expr_classes, 35)).astype(np.float64)

    y = rng.integers(0, num_expr_classes, size=n)
    emb = centers[y] + rng.normal(0.0, 0.35, size=(n, embedding_dim))

    expr_logits = np.full((n, 8), -2.0)
    expr_logits[np.arange(n), y % 8] = 2.0
    expr_logits += rng.normal(0.0, 0.25, size=(n, 8))

    va_core = np.tanh(_onehot(y, num_expr_classes) @ va_map)
    va_true = np.clip(va_core + rng.normal(0.0, 0.05, size=(n, 2)), -1.0, 1.0)
    backbone_va = np.clip(va_core + rng.normal(0.0, 0.05, size=(n, 2)), -1.0, 1.0)
    logits = np.concatenate([expr_logits, backbone_va], axis=1)

    margins = (emb - centers.mean(axis=0)) @ au_planes
    au_true = (margins > 0).astype(np.int8)

    expr = y.astype(np.int64)
    va = va_true.copy()
    aus = au_true.copy()
    for frac, drop in ((expr_fraction, "expr"), (va_fraction, "va"), (au_fraction, "au")):
        if frac >= 1.0:
            continue
        hide = rng.random(n) >= frac
        if drop == "expr":
            expr[hide] = -1
        elif drop == "va":
            va[hide] = np.nan
        else:
            aus[hide] = -1

    of = None
    if openface:
        of = 0.9 * of_patterns[y] + rng.normal(0.0, 0.15, size=(n, 35))

    ids = [f"{id_prefix}{i:06d}" for i in range(n)]
    return make_dataset(ids, emb, logits, expr, va, aus, openface=of,
                        num_expr_classes=num_expr_classes)


def _onehot(y: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def append_unlabeled(ds: Dataset, n_extra: int, seed: int,
                     id_prefix: str = "u") -> Dataset:
    """Return a new dataset with ``n_extra`` fully-unlabeled records
    appended after the existing ones (features random, labels absent)."""
    rng = np.random.default_rng([seed, 0xBEEF])
    d = ds.manifest.feature_dim
    emb = np.concatenate([ds.embeddings, rng.normal(0.0, 1.0, size=(n_extra, d))])
    logits = np.concatenate([ds.logits, rng.normal(0.0, 1.0, size=(n_extra, 10))])
    expr = np.concatenate([ds.expr, np.full(n_extra, -1, dtype=np.int64)])
    va = np.concatenate([ds.va, np.full((n_extra, 2), np.nan)])
    aus = np.concatenate([ds.aus, np.full((n_extra, 12), -1, dtype=np.int8)])
    openface = None
    mask = None
    if ds.openface is not None:
        openface = np.concatenate([ds.openface, np.zeros((n_extra, 35))])
        mask = np.concatenate([ds.openface_mask, np.zeros(n_extra, dtype=bool)])
    ids = list(ds.ids) + [f"{id_prefix}{i:06d}" for i in range(n_extra)]
    return make_dataset(ids, emb, logits, expr, va, aus, openface=openface,
                        openface_mask=mask,
                        num_expr_classes=ds.manifest.num_expr_classes)


def synthetic_lsd_scores(n: int, seed: int, pre_accuracy: float = 0.7,
                         ft_accuracy: float = 0.7) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Two noisy 6-class score matrices over shared labels, for exercising
    the ensemble path; the two models err on independent records."""
    rng = np.random.default_rng([seed, 0x15D])
    labels = rng.integers(0, 6, size=n)
    def noisy(acc):
        scores = rng.random((n, 6)) * 0.5
        correct = rng.random(n) < acc
        picked = np.where(correct, labels, rng.integers(0, 6, size=n))
        scores[np.arange(n), picked] += 1.0
        return scores / scores.sum(axis=1, keepdims=True)
    return noisy(pre_accuracy), noisy(ft_accuracy), labels
