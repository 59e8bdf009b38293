"""Shared constructed fixtures: a dataset whose features literally encode
the labels, plus hand-built heads that decode them exactly."""

from __future__ import annotations

import numpy as np

from affecthead import net
from affecthead.featstore import Dataset, make_dataset
from affecthead.training import HeadBundle

ORACLE_DIM = 20  # 8 one-hot class dims + 12 AU sign dims


def oracle_dataset(n: int = 24, seed: int = 0) -> Dataset:
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.arange(8), rng.integers(0, 8, size=n - 8)])
    aus = rng.integers(0, 2, size=(n, 12)).astype(np.int8)
    aus[:12] |= np.eye(12, dtype=np.int8)  # every AU occurs at least once
    va = rng.uniform(-0.8, 0.8, size=(n, 2))

    emb = np.zeros((n, ORACLE_DIM))
    emb[np.arange(n), y] = 10.0
    emb[:, 8:] = 10.0 * (2.0 * aus - 1.0)
    logits = rng.normal(size=(n, 10)) * 0.1
    logits[:, 8] = np.arctanh(va[:, 0])
    logits[:, 9] = np.arctanh(va[:, 1])

    ids = [f"o{i:04d}" for i in range(n)]
    return make_dataset(ids, emb, logits, y.astype(np.int64), va, aus)


def oracle_bundle() -> HeadBundle:
    concat = ORACLE_DIM + 10

    expr = net.init_model([net.LayerSpec(concat, 8, "softmax")], 0)
    expr.weights[0][:] = 0.0
    expr.weights[0][np.arange(8), np.arange(8)] = 1.0

    va = net.init_model([net.LayerSpec(10, 2, "tanh")], 0)
    va.weights[0][:] = 0.0
    va.weights[0][0, 8] = 1.0
    va.weights[0][1, 9] = 1.0

    au = net.init_model([net.LayerSpec(concat, 12, "sigmoid")], 0)
    au.weights[0][:] = 0.0
    au.weights[0][np.arange(12), ORACLE_DIM - 12 + np.arange(12)] = 1.0

    return HeadBundle(expr_head=expr, va_head=va, au_head=au)
