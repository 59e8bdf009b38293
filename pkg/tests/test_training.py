import math

import numpy as np
import pytest

from affecthead import metrics
from affecthead.synth import append_unlabeled, synthetic_mtl_dataset
from affecthead.training import (ClassWeights, TrainConfig, bce_loss, ccc_loss,
                                 class_weights, composite_mt_loss, train_heads,
                                 train_openface_mlp, weighted_ce)
from oracles import finite_diff, max_rel_error

LEARN_CFG = TrainConfig(epochs=40, learning_rate=0.005)


class TestClassWeights:
    def test_direct_ratio(self):
        assert class_weights([100, 50, 25]).weights.tolist() == [1.0, 2.0, 4.0]

    def test_balanced(self):
        assert class_weights([7, 7, 7]).weights.tolist() == [1.0, 1.0, 1.0]

    def test_extreme_ratio(self):
        assert class_weights([1, 1000000]).weights.tolist() == [1000000.0, 1.0]

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError, match="class 1"):
            class_weights([5, 0, 3])


class TestWeightedCe:
    def test_uniform_logits_balanced_weights(self):
        w = ClassWeights(np.ones(8))
        loss, _ = weighted_ce(np.zeros((5, 8)), [0, 2, 4, 6, 7], w)
        assert loss == pytest.approx(math.log(8), abs=1e-12)

    def test_confident_correct_logit_drives_loss_to_zero(self):
        w = ClassWeights(np.ones(3))
        z = np.array([[50.0, 0.0, 0.0]])
        loss, _ = weighted_ce(z, [0], w)
        assert loss < 1e-20

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            n, c = int(rng.integers(2, 9)), int(rng.integers(2, 6))
            z = rng.normal(size=(n, c))
            y = rng.integers(0, c, size=n)
            w = ClassWeights(rng.uniform(1.0, 4.0, size=c))
            _, grad = weighted_ce(z, y, w)
            numeric = finite_diff(lambda: weighted_ce(z, y, w)[0], [z])
            assert max_rel_error([grad], numeric) <= 1e-4

    def test_equal_weights_is_plain_cross_entropy(self):
        rng = np.random.default_rng(1)
        z = rng.normal(size=(12, 5))
        y = rng.integers(0, 5, size=12)
        loss, _ = weighted_ce(z, y, ClassWeights(np.full(5, 1.0)))
        zs = z - z.max(axis=1, keepdims=True)
        logp = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
        plain = float(-logp[np.arange(12), y].mean())
        assert loss == pytest.approx(plain, abs=1e-12)

    def test_out_of_range_label(self):
        with pytest.raises(ValueError):
            weighted_ce(np.zeros((2, 3)), [0, 3], ClassWeights(np.ones(3)))


class TestCccLoss:
    def test_perfect_concordance(self):
        t = np.array([[0.1, -0.2], [0.5, 0.3], [-0.4, 0.9], [0.0, -0.6]])
        loss, grad = ccc_loss(t, t)
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_negated_zero_mean_columns(self):
        t = np.array([[1.0, 2.0], [-1.0, -2.0], [0.5, 1.0], [-0.5, -1.0]])
        t -= t.mean(axis=0)
        loss, _ = ccc_loss(-t, t)
        assert loss == pytest.approx(2.0, abs=1e-12)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            pred = rng.normal(size=(8, 2))
            true = rng.uniform(-1, 1, size=(8, 2))
            _, grad = ccc_loss(pred, true)
            numeric = finite_diff(lambda: ccc_loss(pred, true)[0], [pred])
            assert max_rel_error([grad], numeric) <= 1e-4

    def test_consistent_with_ccc_metric(self):
        rng = np.random.default_rng(3)
        pred = rng.normal(size=(30, 2))
        true = rng.uniform(-1, 1, size=(30, 2))
        loss, _ = ccc_loss(pred, true)
        direct = 1.0 - 0.5 * (metrics.ccc(pred[:, 0], true[:, 0])
                              + metrics.ccc(pred[:, 1], true[:, 1]))
        assert loss == pytest.approx(direct, abs=1e-12)

    def test_degenerate_column_contributes_zero(self):
        pred = np.array([[0.5, 0.1], [0.5, -0.2], [0.5, 0.3]])
        true = np.array([[0.5, 0.1], [0.5, -0.2], [0.5, 0.3]])
        # First column constant on both sides: denominator degenerate.
        loss, grad = ccc_loss(pred, true)
        assert loss == pytest.approx(1.0 - 0.5 * 1.0, abs=1e-12)
        assert (grad[:, 0] == 0).all()

    def test_too_small_batch(self):
        with pytest.raises(ValueError):
            ccc_loss(np.zeros((1, 2)), np.zeros((1, 2)))


class TestBceLoss:
    def test_zero_logits(self):
        loss, _ = bce_loss(np.zeros((3, 12)), np.random.default_rng(0).integers(0, 2, (3, 12)))
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_correct_limit(self):
        loss, _ = bce_loss(np.full((1, 1), 60.0), np.ones((1, 1)))
        assert loss < 1e-20

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            z = rng.normal(size=(6, 12)) * 2
            t = rng.integers(0, 2, size=(6, 12))
            _, grad = bce_loss(z, t)
            numeric = finite_diff(lambda: bce_loss(z, t)[0], [z])
            assert max_rel_error([grad], numeric) <= 1e-4

    def test_rejects_non_binary_target(self):
        with pytest.raises(ValueError):
            bce_loss(np.zeros((1, 2)), np.array([[0.5, 1.0]]))


class TestCompositeLoss:
    def test_perfect_va_uniform_expr(self):
        n = 6
        va = np.array([[0.1, -0.2], [0.3, 0.5], [-0.4, 0.2],
                       [0.6, -0.1], [-0.2, 0.4], [0.0, 0.3]])
        loss, ge, gv = composite_mt_loss(np.zeros((n, 8)), va,
                                         np.arange(6) % 8, va,
                                         ClassWeights(np.ones(8)))
        assert loss == pytest.approx(math.log(8), abs=1e-12)

    def test_both_terms_vanish_in_the_confident_limit(self):
        n = 6
        va = np.array([[0.1, -0.2], [0.3, 0.5], [-0.4, 0.2],
                       [0.6, -0.1], [-0.2, 0.4], [0.0, 0.3]])
        labels = np.arange(n) % 8
        logits = np.full((n, 8), -40.0)
        logits[np.arange(n), labels] = 40.0
        loss, _, _ = composite_mt_loss(logits, va, labels, va,
                                       ClassWeights(np.ones(8)))
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_va_only_batch(self):
        va = np.array([[0.1, -0.2], [0.3, 0.5], [-0.4, 0.2]])
        pred = va * 0.5
        loss, ge, gv = composite_mt_loss(np.zeros((3, 8)), pred,
                                         np.full(3, -1), va,
                                         ClassWeights(np.ones(8)))
        expected, _ = ccc_loss(pred, va)
        assert loss == pytest.approx(expected, abs=1e-12)
        assert (ge == 0).all()

    def test_masked_rows_get_zero_gradient(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(6, 8))
        vap = rng.normal(size=(6, 2))
        labels = np.array([0, -1, 3, -1, 5, -1])
        vat = np.full((6, 2), np.nan)
        vat[[0, 2, 4]] = rng.uniform(-1, 1, size=(3, 2))
        loss, ge, gv = composite_mt_loss(z, vap, labels, vat, ClassWeights(np.ones(8)))
        assert (ge[[1, 3, 5]] == 0).all()
        assert (gv[[1, 3, 5]] == 0).all()

    def test_no_usable_labels(self):
        with pytest.raises(ValueError, match="no usable labels"):
            composite_mt_loss(np.zeros((2, 8)), np.zeros((2, 2)),
                              np.full(2, -1), np.full((2, 2), np.nan),
                              ClassWeights(np.ones(8)))

    def test_single_va_row_omits_ccc_term(self):
        labels = np.array([1, -1])
        vat = np.array([[0.5, 0.5], [np.nan, np.nan]])
        loss, _, gv = composite_mt_loss(np.zeros((2, 8)), np.zeros((2, 2)),
                                        labels, vat, ClassWeights(np.ones(8)))
        assert loss == pytest.approx(math.log(8), abs=1e-12)
        assert (gv == 0).all()


@pytest.fixture(scope="module")
def mtl_data():
    train = synthetic_mtl_dataset(2000, seed=0, embedding_dim=64, openface=True,
                                  id_prefix="tr")
    val = synthetic_mtl_dataset(500, seed=1, embedding_dim=64, openface=True,
                                id_prefix="va")
    return train, val


class TestTrainHeads:
    def test_separate_protocol_learns_all_tasks(self, mtl_data):
        train, val = mtl_data
        bundle, history = train_heads(train, val, LEARN_CFG)
        assert max(h["expr_val_f1"] for h in history) >= 0.9
        assert max(h["va_val_ccc"] for h in history) >= 0.9
        assert max(h["au_val_f1"] for h in history) >= 0.85  # before tuning

    def test_training_is_deterministic(self, mtl_data):
        train, val = mtl_data
        cfg = TrainConfig(epochs=3)
        b1, h1 = train_heads(train, val, cfg)
        b2, h2 = train_heads(train, val, cfg)
        assert h1 == h2
        for p1, p2 in zip(b1.expr_head.params() + b1.va_head.params() + b1.au_head.params(),
                          b2.expr_head.params() + b2.va_head.params() + b2.au_head.params()):
            assert (p1 == p2).all()

    def test_unlabeled_records_do_not_change_separate_training(self, mtl_data):
        train, val = mtl_data
        cfg = TrainConfig(epochs=3)
        b1, h1 = train_heads(train, val, cfg)
        padded = append_unlabeled(train, 100, seed=9)
        b2, h2 = train_heads(padded, val, cfg)
        assert h1 == h2
        for p1, p2 in zip(b1.expr_head.params(), b2.expr_head.params()):
            assert (p1 == p2).all()
        for p1, p2 in zip(b1.va_head.params(), b2.va_head.params()):
            assert (p1 == p2).all()
        for p1, p2 in zip(b1.au_head.params(), b2.au_head.params()):
            assert (p1 == p2).all()

    def test_simultaneous_protocol_with_missing_labels(self):
        train = synthetic_mtl_dataset(600, seed=2, embedding_dim=32,
                                      expr_fraction=0.5, va_fraction=0.6,
                                      au_fraction=0.7, id_prefix="tr")
        val = synthetic_mtl_dataset(200, seed=3, embedding_dim=32, id_prefix="va")
        cfg = TrainConfig(protocol="simultaneous", epochs=8, learning_rate=0.005)
        bundle, history = train_heads(train, val, cfg)
        assert len(history) == 8
        assert history[-1]["expr_val_f1"] > history[0]["expr_val_f1"] * 0.5
        assert np.isfinite([h["expr_loss"] for h in history]).all()

    def test_first_epoch_reduces_every_loss(self, mtl_data):
        train, val = mtl_data
        cfg = TrainConfig(epochs=1)
        bundle, history = train_heads(train, val, cfg)
        # Initial losses from freshly initialized heads on the full epoch data.
        from affecthead.training import (_ce_grad_fn, _ccc_grad_fn, _bce_grad_fn,
                                         _task_arrays, build_heads)
        init = build_heads(64, 8, cfg.seed)
        Xe, ye = _task_arrays(train, "expr")
        Xv, yv = _task_arrays(train, "va")
        Xa, ya = _task_arrays(train, "au")
        w = class_weights(np.bincount(ye, minlength=8))
        all_e = np.arange(len(Xe))
        assert history[0]["expr_loss"] < _ce_grad_fn(Xe, ye, w)(init.expr_head, all_e)[0]
        assert history[0]["va_loss"] < _ccc_grad_fn(Xv, yv)(init.va_head, np.arange(len(Xv)))[0]
        assert history[0]["au_loss"] < _bce_grad_fn(Xa, ya)(init.au_head, np.arange(len(Xa)))[0]

    def test_sam_optimizer_supported(self, mtl_data):
        train, val = mtl_data
        cfg = TrainConfig(epochs=2, optimizer="adam_sam", rho=0.05)
        bundle, history = train_heads(train, val, cfg)
        assert len(history) == 2

    def test_batch_size_below_two_rejected(self, mtl_data):
        train, val = mtl_data
        with pytest.raises(ValueError, match="batch_size"):
            train_heads(train, val, TrainConfig(batch_size=1))

    def test_empty_task_view_rejected(self):
        train = synthetic_mtl_dataset(50, seed=4, embedding_dim=16,
                                      va_fraction=0.0, id_prefix="tr")
        val = synthetic_mtl_dataset(20, seed=5, embedding_dim=16, id_prefix="va")
        with pytest.raises(Exception, match="va"):
            train_heads(train, val, TrainConfig(epochs=1))


class TestTrainOpenfaceMlp:
    def test_learns_descriptor_patterns(self, mtl_data):
        train, val = mtl_data
        model, history = train_openface_mlp(train, val, TrainConfig(epochs=10))
        assert max(h["val_f1"] for h in history) >= 0.9
        assert model.layers[0].in_dim == 35
        assert model.layers[0].out_dim == 128

    def test_single_epoch_history(self, mtl_data):
        train, val = mtl_data
        _, history = train_openface_mlp(train, val, TrainConfig(epochs=1))
        assert len(history) == 1

    def test_missing_descriptors_rejected(self):
        train = synthetic_mtl_dataset(30, seed=6, embedding_dim=16, id_prefix="tr")
        val = synthetic_mtl_dataset(10, seed=7, embedding_dim=16, id_prefix="va")
        with pytest.raises(Exception, match="openface"):
            train_openface_mlp(train, val, TrainConfig(epochs=1))
