"""Acceptance suite: one test per release criterion, each printing a
[PASS]/[FAIL] line (run with ``pytest tests/test_acceptance.py -s`` to see
them as they execute)."""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from affecthead import net
from affecthead.calibrate import (CalibrationProfile, evaluate_mtl,
                                  search_au_thresholds, search_blend_weight)
from affecthead.cli import main as cli_main
from affecthead.featstore import save_dataset, task_features, task_view
from affecthead.metrics import ccc, mtl_score
from affecthead.synth import append_unlabeled, synthetic_mtl_dataset
from affecthead.training import (ClassWeights, TrainConfig, bce_loss, ccc_loss,
                                 save_bundle, train_heads, weighted_ce)
from oracles import (brute_force_au_thresholds, brute_force_blend_weight,
                     ccc_reference, finite_diff, max_rel_error)


@contextmanager
def criterion(name):
    try:
        yield
    except Exception:
        print(f"[FAIL] {name}")
        raise
    print(f"[PASS] {name}")


def test_ccc_oracle_equivalence():
    with criterion("CCC oracle equivalence (1000 pairs, |diff| <= 1e-10)"):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n = int(rng.integers(2, 65))
            scale = rng.uniform(0.05, 10.0)
            x = rng.normal(size=n) * scale
            y = rng.normal(size=n) * scale + rng.uniform(-1, 1) * x
            assert abs(ccc(x, y) - ccc_reference(x, y)) <= 1e-10


def test_gradient_suite():
    name = "Gradient suite (4 x 100 instances, rel err <= 1e-4, < 30 s)"
    with criterion(name):
        t0 = time.perf_counter()
        rng = np.random.default_rng(7)

        for _ in range(100):
            n, c = int(rng.integers(2, 10)), int(rng.integers(2, 9))
            z = rng.normal(size=(n, c)) * rng.uniform(0.5, 3.0)
            y = rng.integers(0, c, size=n)
            w = ClassWeights(rng.uniform(1.0, 5.0, size=c))
            _, grad = weighted_ce(z, y, w)
            numeric = finite_diff(lambda: weighted_ce(z, y, w)[0], [z])
            assert max_rel_error([grad], numeric) <= 1e-4

        for _ in range(100):
            n, k = int(rng.integers(1, 8)), int(rng.integers(1, 13))
            z = rng.normal(size=(n, k)) * rng.uniform(0.5, 3.0)
            t = rng.integers(0, 2, size=(n, k))
            _, grad = bce_loss(z, t)
            numeric = finite_diff(lambda: bce_loss(z, t)[0], [z])
            assert max_rel_error([grad], numeric) <= 1e-4

        for _ in range(100):
            n = int(rng.integers(2, 17))
            pred = rng.normal(size=(n, 2))
            true = rng.uniform(-1, 1, size=(n, 2))
            _, grad = ccc_loss(pred, true)
            numeric = finite_diff(lambda: ccc_loss(pred, true)[0], [pred])
            assert max_rel_error([grad], numeric) <= 1e-4

        combos = [("relu", "linear"), ("tanh", "sigmoid"), ("sigmoid", "tanh"),
                  ("relu", "softmax"), ("tanh", "linear")]
        for i in range(100):
            a1, a2 = combos[i % len(combos)]
            d0, d1, d2 = (int(rng.integers(2, 7)) for _ in range(3))
            model = net.init_model([net.LayerSpec(d0, d1, a1),
                                    net.LayerSpec(d1, d2, a2)],
                                   seed=int(rng.integers(0, 10_000)))
            x = rng.normal(size=(int(rng.integers(1, 6)), d0))
            r = rng.normal(size=(x.shape[0], d2))

            def loss():
                return float((net.forward(model, x)[-1] * r).sum())

            acts = net.forward(model, x)
            wg, bg, _ = net.backward(model, acts, r)
            analytic = net.flatten_grads(wg, bg)
            numeric = finite_diff(loss, model.params())
            assert max_rel_error(analytic, numeric) <= 1e-4

        elapsed = time.perf_counter() - t0
        assert elapsed < 30.0, f"gradient suite took {elapsed:.1f}s"


def test_search_oracle_equivalence():
    name = "Search-oracle equivalence (200 + 200 instances, exact incl. ties)"
    with criterion(name):
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(1, 51))
            c = int(rng.integers(2, 9))
            s_pre = rng.random((n, c))
            s_ft = rng.random((n, c))
            labels = rng.integers(0, c, size=n)
            got = search_blend_weight(s_pre, s_ft, labels, 0.1)
            want = brute_force_blend_weight(s_pre, s_ft, labels, 0.1)
            assert got[0] == want[0] and got[1] == want[1]

        for _ in range(200):
            n = int(rng.integers(1, 51))
            scores = rng.random((n, 12))
            true = rng.integers(0, 2, size=(n, 12))
            thr, f1 = search_au_thresholds(scores, true, 0.1)
            bthr, bf1 = brute_force_au_thresholds(scores, true, 0.1)
            assert (thr == bthr).all() and (f1 == bf1).all()


def test_reference_arithmetic():
    with criterion("Reference arithmetic (mean CCC and aggregate sums)"):
        assert abs(mtl_score(0.4749, 0.4192, 0.0, 0.0).p_va - 0.4471) < 5e-5
        s1 = mtl_score(0.447, 0.447, 0.335, 0.522)
        assert s1.p_mtl == 0.447 + 0.335 + 0.522
        assert abs(s1.p_mtl - 1.304) < 1e-12
        s2 = mtl_score(0.447, 0.447, 0.357, 0.522)
        assert s2.p_mtl == 0.447 + 0.357 + 0.522
        assert abs(s2.p_mtl - 1.326) < 1e-12


def test_synthetic_learnability():
    name = "Synthetic learnability (expr/VA/AU >= 0.9, < 60 s)"
    with criterion(name):
        t0 = time.perf_counter()
        train = synthetic_mtl_dataset(2000, seed=0, embedding_dim=64, id_prefix="tr")
        val = synthetic_mtl_dataset(500, seed=1, embedding_dim=64, id_prefix="va")
        bundle, history = train_heads(train, val,
                                      TrainConfig(epochs=40, learning_rate=0.005))
        expr_f1 = max(h["expr_val_f1"] for h in history)
        va_ccc = max(h["va_val_ccc"] for h in history)
        au_idx = task_view(val, "au").indices
        scores = net.forward(bundle.au_head, task_features(val, "au", au_idx))[-1]
        _, per_au = search_au_thresholds(scores, val.aus[au_idx], 0.1)
        au_f1 = float(per_au.mean())
        elapsed = time.perf_counter() - t0
        print(f"  expr F1 {expr_f1:.3f}, VA CCC {va_ccc:.3f}, "
              f"AU F1(tuned) {au_f1:.3f}, {elapsed:.1f}s", end=" ")
        assert expr_f1 >= 0.9
        assert va_ccc >= 0.9
        assert au_f1 >= 0.9
        assert elapsed < 60.0


def test_protocol_invariance(tmp_path):
    name = "Protocol invariance (500 unlabeled records change nothing)"
    with criterion(name):
        cfg = TrainConfig(epochs=5)
        train = synthetic_mtl_dataset(800, seed=2, embedding_dim=48, id_prefix="tr")
        val = synthetic_mtl_dataset(200, seed=3, embedding_dim=48, id_prefix="va")
        padded = append_unlabeled(train, 500, seed=4)

        b1, h1 = train_heads(train, val, cfg)
        b2, h2 = train_heads(padded, val, cfg)
        assert h1 == h2
        save_bundle(b1, tmp_path / "base")
        save_bundle(b2, tmp_path / "padded")
        for fname in ("expr_head.json", "va_head.json", "au_head.json"):
            assert (tmp_path / "base" / fname).read_bytes() == \
                   (tmp_path / "padded" / fname).read_bytes()

        r1 = evaluate_mtl(b1, val, CalibrationProfile())
        r2 = evaluate_mtl(b2, val, CalibrationProfile())
        d1, d2 = r1.to_dict(), r2.to_dict()
        d1.pop("expr_confusion"), d2.pop("expr_confusion")
        assert d1 == d2
        assert (r1.expr_confusion.counts == r2.expr_confusion.counts).all()

        sim_cfg = TrainConfig(protocol="simultaneous", epochs=2)
        _, sim_history = train_heads(padded, val, sim_cfg)
        assert len(sim_history) == 2


def test_sam_degeneracy():
    with criterion("SAM degeneracy (rho = 0 tracks Adam for 100 steps)"):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(64, 6))
        Y = rng.integers(0, 2, size=(64, 4))

        def grad_fn(model, batch):
            acts = net.forward(model, X)
            z = net.final_preactivation(model, acts)
            loss, dz = bce_loss(z, Y)
            wg, bg, _ = net.backward(model, acts, dz, at_preactivation=True)
            return loss, net.flatten_grads(wg, bg)

        specs = [net.LayerSpec(6, 5, "relu"), net.LayerSpec(5, 4, "sigmoid")]
        m_sam = net.init_model(specs, 9)
        m_adam = net.init_model(specs, 9)
        st_sam = net.init_optimizer(m_sam.params(), kind="adam_sam", rho=0.0)
        st_adam = net.init_optimizer(m_adam.params(), kind="adam")
        for _ in range(100):
            net.sam_step(st_sam, m_sam, None, grad_fn)
            _, grads = grad_fn(m_adam, None)
            net.adam_step(st_adam, m_adam.params(), grads)
            for a, b in zip(m_sam.params(), m_adam.params()):
                assert (a == b).all()
        assert st_sam.step_count == st_adam.step_count == 100


def test_cli_determinism(tmp_path):
    name = "CLI determinism (train/eval/tune rerun byte-identical)"
    with criterion(name):
        data = tmp_path / "data"
        train = synthetic_mtl_dataset(300, seed=6, embedding_dim=32,
                                      openface=True, id_prefix="tr")
        val = synthetic_mtl_dataset(120, seed=7, embedding_dim=32,
                                    openface=True, id_prefix="va")
        save_dataset(train, data / "train" / "manifest.json")
        save_dataset(val, data / "val" / "manifest.json")

        outputs = {}
        for tag in ("one", "two"):
            ckpt = tmp_path / tag / "run"
            rep = tmp_path / tag / "rep"
            tuned = tmp_path / tag / "tuned"
            assert cli_main(["train", "--manifest", str(data / "train" / "manifest.json"),
                             "--val-manifest", str(data / "val" / "manifest.json"),
                             "--out", str(ckpt), "--epochs", "3", "--seed", "5"]) == 0
            assert cli_main(["eval", "--manifest", str(data / "val" / "manifest.json"),
                             "--checkpoints", str(ckpt), "--out", str(rep),
                             "--seed", "5"]) == 0
            assert cli_main(["tune", "--manifest", str(data / "val" / "manifest.json"),
                             "--checkpoints", str(ckpt), "--out", str(tuned),
                             "--seed", "5"]) == 0
            files = {}
            for d in (ckpt, rep, tuned):
                for f in sorted(d.iterdir()):
                    files[f"{d.name}/{f.name}"] = f.read_bytes()
            outputs[tag] = files

        assert outputs["one"].keys() == outputs["two"].keys()
        for key in outputs["one"]:
            assert outputs["one"][key] == outputs["two"][key], key
