"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``tune``, ``blend``, ``predict``,
``validate``, plus ``synth`` for generating runnable demo datasets.
Every command accepts ``--config FILE`` (JSON, keys = long flag names
with underscores); explicit flags win over config values. All outputs
are deterministic: rerunning a command with the same inputs and seed
rewrites byte-identical files, and every error goes to stderr with an
``error:`` prefix and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import figures, net
from .calibrate import (CalibrationProfile, decide, evaluate_lsd, evaluate_mtl,
                        expression_scores, search_au_thresholds,
                        search_blend_weight)
from .featstore import (Dataset, DatasetError, load_dataset, save_dataset,
                        task_features, task_view, validate_dataset)
from .metrics import AU_NAMES, aggregate_report, binary_f1_per_au, macro_f1
from .synth import synthetic_mtl_dataset
from .training import (TrainConfig, load_bundle, save_bundle, train_heads,
                       train_openface_mlp, write_history_csv)


class CliError(Exception):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _resolve(args: argparse.Namespace, config: dict, key: str, default):
    v = getattr(args, key, None)
    if v is not None:
        return v
    if key in config:
        return config[key]
    return default


def _load_config(args: argparse.Namespace) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise CliError(f"config {path} must be a JSON object")
    return doc


def _require(value, flag: str):
    if value is None:
        raise CliError(f"missing required option {flag}")
    return value


def _load(manifest_path: str) -> Dataset:
    return load_dataset(manifest_path)


def _write_run_manifest(out_dir: str, command: str, settings: dict) -> None:
    with open(os.path.join(out_dir, "run.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({"command": command, "settings": settings}, fh, indent=2)
        fh.write("\n")


# --- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    config = _load_config(args)
    manifest = _require(_resolve(args, config, "manifest", None), "--manifest")
    val_manifest = _require(_resolve(args, config, "val_manifest", None), "--val-manifest")
    out_dir = _require(_resolve(args, config, "out", None), "--out")
    cfg = TrainConfig(
        protocol=_resolve(args, config, "protocol", "separate"),
        epochs=int(_resolve(args, config, "epochs", 20)),
        batch_size=int(_resolve(args, config, "batch_size", 128)),
        learning_rate=float(_resolve(args, config, "learning_rate", 0.001)),
        optimizer=_resolve(args, config, "optimizer", "adam"),
        rho=float(_resolve(args, config, "rho", 0.05)),
        seed=int(_resolve(args, config, "seed", 0)),
    )
    train_ds = _load(manifest)
    val_ds = _load(val_manifest)
    bundle, history = train_heads(train_ds, val_ds, cfg)

    of_history = None
    if (train_ds.openface is not None and val_ds.openface is not None
            and task_view(train_ds, "expr_openface").indices.size
            and task_view(val_ds, "expr_openface").indices.size):
        bundle.openface_mlp, of_history = train_openface_mlp(train_ds, val_ds, cfg)

    os.makedirs(out_dir, exist_ok=True)
    save_bundle(bundle, out_dir)
    write_history_csv(history, os.path.join(out_dir, "history.csv"))
    figures.render_history(history, os.path.join(out_dir, "history.png"))
    if of_history is not None:
        write_history_csv(of_history, os.path.join(out_dir, "openface_history.csv"))
        figures.render_history(of_history, os.path.join(out_dir, "openface_history.png"))
    _write_run_manifest(out_dir, "train", {
        "manifest": manifest, "val_manifest": val_manifest, "seed": cfg.seed,
        "protocol": cfg.protocol, "epochs": cfg.epochs, "batch_size": cfg.batch_size,
        "learning_rate": cfg.learning_rate, "optimizer": cfg.optimizer, "rho": cfg.rho,
    })
    last = history[-1]
    print(f"trained {cfg.protocol} heads for {cfg.epochs} epochs -> {out_dir}")
    print(f"final val: expr F1 {last['expr_val_f1']:.4f}, "
          f"va CCC {last['va_val_ccc']:.4f}, au F1 {last['au_val_f1']:.4f}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    seed = int(_resolve(args, config, "seed", 0))
    out_dir = _resolve(args, config, "out", None)
    p_va = _resolve(args, config, "p_va", None)
    p_expr = _resolve(args, config, "p_expr", None)
    p_au = _resolve(args, config, "p_au", None)

    if p_va is not None or p_expr is not None or p_au is not None:
        report = aggregate_report(
            None if p_va is None else float(p_va),
            None if p_expr is None else float(p_expr),
            None if p_au is None else float(p_au))
        report.seed = seed
    else:
        manifest = _require(_resolve(args, config, "manifest", None), "--manifest")
        ckpt_dir = _require(_resolve(args, config, "checkpoints", None), "--checkpoints")
        profile_path = _resolve(args, config, "profile", None)
        profile = CalibrationProfile.load(profile_path) if profile_path else CalibrationProfile()
        ds = _load(manifest)
        bundle = load_bundle(ckpt_dir)
        openface_blend = None
        if bundle.openface_mlp is not None and ds.openface is not None:
            openface_blend = (bundle.openface_mlp, None)
        report = evaluate_mtl(bundle, ds, profile, openface_blend)
        report.seed = seed

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        report.write_json(os.path.join(out_dir, "metrics.json"))
        if report.expr_confusion is not None:
            report.expr_confusion.to_csv(os.path.join(out_dir, "confusion_expr.csv"))
            figures.render_confusion(report.expr_confusion,
                                     os.path.join(out_dir, "confusion_expr.png"),
                                     title="Expression confusion")
            figures.render_bars(report.per_class_f1, report.expr_class_names,
                                os.path.join(out_dir, "per_class_f1.png"),
                                title="Per-class F1")
        if report.per_au_f1 is not None:
            figures.render_bars(report.per_au_f1, AU_NAMES,
                                os.path.join(out_dir, "per_au_f1.png"),
                                title="Per-AU F1")

    suffix = " (partial)" if report.partial else ""
    print(f"P_MTL = {_fmt(report.p_mtl)}{suffix}")
    for name, v in (("P_VA", report.p_va), ("P_EXPR", report.p_expr), ("P_AU", report.p_au)):
        if v is not None:
            print(f"{name} = {_fmt(v)}")
    return 0


def cmd_tune(args) -> int:
    config = _load_config(args)
    manifest = _require(_resolve(args, config, "manifest", None), "--manifest")
    ckpt_dir = _require(_resolve(args, config, "checkpoints", None), "--checkpoints")
    out_dir = _require(_resolve(args, config, "out", None), "--out")
    grid_step = float(_resolve(args, config, "grid_step", 0.1))
    seed = int(_resolve(args, config, "seed", 0))

    ds = _load(manifest)
    bundle = load_bundle(ckpt_dir)
    au_idx = task_view(ds, "au").indices
    if au_idx.size == 0:
        raise CliError(f"{manifest}: no AU labels to tune on")
    scores = net.forward(bundle.au_head, task_features(ds, "au", au_idx))[-1]
    truth = ds.aus[au_idx]
    _, before = binary_f1_per_au(truth, scores, np.full(12, 0.5))
    thresholds, per_au = search_au_thresholds(scores, truth, grid_step)
    after = float(per_au.mean())
    print(f"P_AU before = {_fmt(before)} (thresholds 0.5)")
    print(f"P_AU after  = {_fmt(after)} (tuned)")

    blend_weight = 1.0
    if bundle.openface_mlp is not None and ds.openface is not None:
        rows = np.flatnonzero(ds.expr_mask & ds.openface_mask)
        if rows.size:
            s_main = net.forward(bundle.expr_head, task_features(ds, "expr", rows))[-1]
            s_aux = net.forward(bundle.openface_mlp, ds.openface[rows])[-1]
            labels = ds.expr[rows]
            num_classes = ds.manifest.num_expr_classes
            f1_before = macro_f1(labels, decide(s_main), num_classes)[0]
            blend_weight, f1_after = search_blend_weight(s_main, s_aux, labels, grid_step)
            print(f"expr F1 before = {_fmt(f1_before)} (w = 1)")
            print(f"expr F1 after  = {_fmt(f1_after)} (w = {_fmt(blend_weight)})")

    profile = CalibrationProfile(blend_weight=blend_weight, au_thresholds=thresholds,
                                 grid_step=grid_step, tuned_on=manifest, seed=seed)
    os.makedirs(out_dir, exist_ok=True)
    profile.save(os.path.join(out_dir, "profile.json"))
    print(f"profile -> {os.path.join(out_dir, 'profile.json')}")
    return 0


def _read_scores_csv(path: str) -> tuple[list[str], np.ndarray]:
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id" or len(header) < 2:
            raise CliError(f"{path}: expected header id,s0..s{{C-1}}")
        ids, rows = [], []
        for row in reader:
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, np.asarray(rows, dtype=np.float64)


def _read_expression_labels(path: str, ids: list[str]) -> np.ndarray:
    """Expression column of a labels.csv, aligned to the given ids."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames \
                or "expression" not in reader.fieldnames:
            raise CliError(f"{path}: expected columns id and expression")
        by_id = {}
        for row in reader:
            if row["expression"] != "":
                by_id[row["id"]] = int(row["expression"])
    missing = [i for i in ids if i not in by_id]
    if missing:
        raise CliError(f"{path}: no expression label for id {missing[0]!r} "
                       f"({len(missing)} missing)")
    return np.asarray([by_id[i] for i in ids], dtype=np.int64)


def cmd_blend(args) -> int:
    config = _load_config(args)
    pre_path = _require(_resolve(args, config, "pre", None), "--pre")
    ft_path = _require(_resolve(args, config, "ft", None), "--ft")
    labels_path = _require(_resolve(args, config, "labels", None), "--labels")
    out_dir = _require(_resolve(args, config, "out", None), "--out")
    grid_step = float(_resolve(args, config, "grid_step", 0.1))
    seed = int(_resolve(args, config, "seed", 0))

    pre_ids, s_pre = _read_scores_csv(pre_path)
    ft_ids, s_ft = _read_scores_csv(ft_path)
    if pre_ids != ft_ids:
        raise CliError("score files disagree on ids or order")
    labels = _read_expression_labels(labels_path, pre_ids)
    result = evaluate_lsd(s_pre, s_ft, labels, grid_step)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "blend.json"), "w", encoding="utf-8", newline="\n") as fh:
        json.dump({
            "blend_weight": result.blend_weight,
            "f1": result.f1,
            "f1_pre": result.f1_pre,
            "f1_ft": result.f1_ft,
            "per_class_f1": result.per_class_f1,
            "grid_step": grid_step,
            "seed": seed,
        }, fh, indent=2)
        fh.write("\n")
    result.confusion_pre.to_csv(os.path.join(out_dir, "confusion_pre.csv"))
    result.confusion_blend.to_csv(os.path.join(out_dir, "confusion_blend.csv"))
    figures.render_confusion(result.confusion_pre,
                             os.path.join(out_dir, "confusion_pre.png"),
                             title="First model alone")
    figures.render_confusion(result.confusion_blend,
                             os.path.join(out_dir, "confusion_blend.png"),
                             title="Blended ensemble")
    print(f"w* = {_fmt(result.blend_weight)}")
    print(f"F1 = {_fmt(result.f1)} (pre {_fmt(result.f1_pre)}, ft {_fmt(result.f1_ft)})")
    return 0


def cmd_predict(args) -> int:
    config = _load_config(args)
    manifest = _require(_resolve(args, config, "manifest", None), "--manifest")
    ckpt_dir = _require(_resolve(args, config, "checkpoints", None), "--checkpoints")
    out_path = _require(_resolve(args, config, "out", None), "--out")
    profile_path = _resolve(args, config, "profile", None)
    profile = CalibrationProfile.load(profile_path) if profile_path else CalibrationProfile()

    ds = _load(manifest)
    bundle = load_bundle(ckpt_dir)
    all_idx = np.arange(len(ds))
    aux = bundle.openface_mlp if ds.openface is not None else None
    expr_scores = expression_scores(bundle, ds, all_idx, aux, profile.blend_weight)
    expr_pred = decide(expr_scores)
    va_pred = net.forward(bundle.va_head, task_features(ds, "va", all_idx))[-1]
    au_scores = net.forward(bundle.au_head, task_features(ds, "au", all_idx))[-1]
    au_pred = (au_scores >= profile.au_thresholds[None, :]).astype(np.int8)

    from .calibrate import write_predictions
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)
    write_predictions(out_path, ds.ids, expr_pred, va_pred, au_pred)
    print(f"{len(ds)} predictions -> {out_path}")
    return 0


def cmd_validate(args) -> int:
    config = _load_config(args)
    manifest = _require(_resolve(args, config, "manifest", None), "--manifest")
    ds = _load(manifest)
    report = validate_dataset(ds)
    print(json.dumps(report.to_dict(), indent=2))
    if not report.ok:
        print("error: dataset validation failed", file=sys.stderr)
        return 1
    return 0


def cmd_synth(args) -> int:
    config = _load_config(args)
    out_dir = _require(_resolve(args, config, "out", None), "--out")
    n_train = int(_resolve(args, config, "train_size", 2000))
    n_val = int(_resolve(args, config, "val_size", 500))
    seed = int(_resolve(args, config, "seed", 0))
    embedding_dim = int(_resolve(args, config, "embedding_dim", 64))
    num_classes = int(_resolve(args, config, "classes", 8))
    openface = bool(_resolve(args, config, "openface", False))

    train = synthetic_mtl_dataset(n_train, seed=seed, embedding_dim=embedding_dim,
                                  num_expr_classes=num_classes, openface=openface,
                                  id_prefix="tr")
    val = synthetic_mtl_dataset(n_val, seed=seed + 1, embedding_dim=embedding_dim,
                                num_expr_classes=num_classes, openface=openface,
                                id_prefix="va")
    save_dataset(train, os.path.join(out_dir, "train", "manifest.json"))
    save_dataset(val, os.path.join(out_dir, "val", "manifest.json"))
    print(os.path.join(out_dir, "train", "manifest.json"))
    print(os.path.join(out_dir, "val", "manifest.json"))
    return 0


# --- parser -----------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; explicit flags override it")
    p.add_argument("--seed", type=int, help="run seed, recorded in outputs (default 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affecthead")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the task heads")
    p.add_argument("--manifest")
    p.add_argument("--val-manifest", dest="val_manifest")
    p.add_argument("--out")
    p.add_argument("--protocol", choices=["separate", "simultaneous"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--optimizer", choices=["adam", "adam_sam"])
    p.add_argument("--rho", type=float)
    _add_common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate checkpoints (or aggregate given components)")
    p.add_argument("--manifest")
    p.add_argument("--checkpoints")
    p.add_argument("--profile")
    p.add_argument("--out")
    p.add_argument("--p-va", dest="p_va", type=float)
    p.add_argument("--p-expr", dest="p_expr", type=float)
    p.add_argument("--p-au", dest="p_au", type=float)
    _add_common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("tune", help="tune AU thresholds (and blend weight) on a dataset")
    p.add_argument("--manifest")
    p.add_argument("--checkpoints")
    p.add_argument("--out")
    p.add_argument("--grid-step", dest="grid_step", type=float)
    _add_common(p)
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("blend", help="search the ensemble weight for two score files")
    p.add_argument("--pre")
    p.add_argument("--ft")
    p.add_argument("--labels")
    p.add_argument("--out")
    p.add_argument("--grid-step", dest="grid_step", type=float)
    _add_common(p)
    p.set_defaults(fn=cmd_blend)

    p = sub.add_parser("predict", help="write calibrated per-record decisions")
    p.add_argument("--manifest")
    p.add_argument("--checkpoints")
    p.add_argument("--profile")
    p.add_argument("--out")
    _add_common(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("validate", help="check a dataset and print its report")
    p.add_argument("--manifest")
    _add_common(p)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("synth", help="generate a synthetic demo dataset pair")
    p.add_argument("--out")
    p.add_argument("--train-size", dest="train_size", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    p.add_argument("--classes", type=int)
    p.add_argument("--openface", action="store_const", const=True)
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, DatasetError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
