"""Feature export: run a serialized emotion backbone over an image folder
and write a dataset in the affecthead on-disk format.

The backbone is a TorchScript graph file taking a float32 [N, 3, 224, 224]
batch (RGB, values in [0, 1]) and returning the pair
``(embeddings [N, 1280], logits [N, 10])``. Images are decoded with
Pillow, converted to RGB and resized to 224x224 bilinear. Output rows are
ordered by image id (the filename stem), so reruns are byte-identical.
"""

from __future__ import annotations

import json
import os
import shlex
import subprocess
import tempfile
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

EMBEDDING_DIM = 1280
LOGITS_DIM = 10
INPUT_SIZE = 224
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".webp")

LABEL_HEADER = ("id,expression,valence,arousal,"
                "au1,au2,au4,au6,au7,au10,au12,au15,au23,au24,au25,au26")


class ExportError(RuntimeError):
    """Fatal export failure (unreadable model, shape contract violation)."""


@dataclass
class ExportJob:
    image_dir: str
    model_file: str
    out_manifest: str
    super_resolution: bool = False
    sr_command: Optional[str] = None  # template with {input} {output} {scale}
    sr_scale: int = 2
    batch_size: int = 16


@dataclass
class ExportReport:
    exported: list[str] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)
    super_resolution: bool = False

    def to_dict(self) -> dict:
        return {"exported": self.exported, "skipped": self.skipped,
                "super_resolution": self.super_resolution}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def list_images(image_dir: str) -> list[tuple[str, str]]:
    """(id, path) pairs sorted by id; the id is the filename stem."""
    try:
        names = os.listdir(image_dir)
    except OSError as exc:
        raise ExportError(f"cannot list image directory {image_dir}: {exc}") from exc
    pairs = []
    for name in names:
        stem, ext = os.path.splitext(name)
        if ext.lower() in IMAGE_EXTENSIONS:
            pairs.append((stem, os.path.join(image_dir, name)))
    pairs.sort(key=lambda p: p[0])
    if len({p[0] for p in pairs}) != len(pairs):
        raise ExportError(f"{image_dir}: duplicate image ids after stripping extensions")
    return pairs


def load_image(path: str) -> np.ndarray:
    """Decode to a float32 CHW array in [0, 1], resized to the model input."""
    with Image.open(path) as img:
        rgb = img.convert("RGB").resize((INPUT_SIZE, INPUT_SIZE), Image.BILINEAR)
    arr = np.asarray(rgb, dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1)


def load_backbone(model_file: str):
    """Load a serialized backbone graph: a torch.export program (.pt2) or,
    failing that, a TorchScript archive."""
    try:
        return torch.export.load(model_file).module()
    except Exception as export_exc:
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DeprecationWarning)
                model = torch.jit.load(model_file, map_location="cpu")
        except Exception:
            raise ExportError(
                f"cannot load backbone graph {model_file}: {export_exc}") from export_exc
        model.eval()
        return model


def _run_backbone(model, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    with torch.no_grad():
        out = model(torch.from_numpy(batch))
    if not (isinstance(out, (tuple, list)) and len(out) == 2):
        raise ExportError("backbone must return (embeddings, logits)")
    emb, logits = (t.numpy() for t in out)
    if emb.ndim != 2 or emb.shape[1] != EMBEDDING_DIM:
        raise ExportError(f"backbone embedding width {emb.shape} != (n, {EMBEDDING_DIM})")
    if logits.ndim != 2 or logits.shape[1] != LOGITS_DIM:
        raise ExportError(f"backbone logits width {logits.shape} != (n, {LOGITS_DIM})")
    return emb.astype(np.float64), logits.astype(np.float64)


def _apply_super_resolution(job: ExportJob, pairs: list[tuple[str, str]],
                            work_dir: str) -> list[tuple[str, str]]:
    """Run the external upscaling command per image into ``work_dir``."""
    if not job.sr_command:
        raise ExportError("--sr requires an upscaling command template")
    out_pairs = []
    for rid, path in pairs:
        target = os.path.join(work_dir, os.path.basename(path))
        cmd = job.sr_command.format(input=path, output=target, scale=job.sr_scale)
        proc = subprocess.run(shlex.split(cmd), capture_output=True, text=True)
        if proc.returncode != 0:
            raise ExportError(f"super-resolution command failed for {rid}: "
                              f"{proc.stderr.strip() or proc.returncode}")
        out_pairs.append((rid, target))
    return out_pairs


def export_features(job: ExportJob) -> ExportReport:
    """Write manifest.json, features.csv, an all-missing labels.csv stub,
    and a sidecar export_report.json next to the manifest.

    Undecodable images are skipped and listed in the report; a backbone
    whose output widths break the format contract is fatal.
    """
    model = load_backbone(job.model_file)
    torch.set_num_threads(1)
    pairs = list_images(job.image_dir)

    report = ExportReport(super_resolution=job.super_resolution)
    out_dir = os.path.dirname(os.path.abspath(job.out_manifest))
    os.makedirs(out_dir, exist_ok=True)

    with tempfile.TemporaryDirectory(prefix="affectexport_sr_") as work_dir:
        if job.super_resolution:
            pairs = _apply_super_resolution(job, pairs, work_dir)

        ids: list[str] = []
        arrays: list[np.ndarray] = []
        for rid, path in pairs:
            try:
                arrays.append(load_image(path))
            except (UnidentifiedImageError, OSError, ValueError) as exc:
                report.skipped.append({"id": rid, "reason": str(exc)})
                continue
            ids.append(rid)

        feat_path = os.path.join(out_dir, "features.csv")
        header = (["id"] + [f"e{i}" for i in range(EMBEDDING_DIM)]
                  + [f"l{i}" for i in range(LOGITS_DIM)])
        with open(feat_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(header) + "\n")
            for start in range(0, len(ids), job.batch_size):
                chunk = ids[start:start + job.batch_size]
                batch = np.stack(arrays[start:start + job.batch_size])
                emb, logits = _run_backbone(model, batch)
                for k, rid in enumerate(chunk):
                    vals = [_fmt(v) for v in emb[k]] + [_fmt(v) for v in logits[k]]
                    fh.write(rid + "," + ",".join(vals) + "\n")
            if not ids:  # still validate the contract once
                _run_backbone(model, np.zeros((1, 3, INPUT_SIZE, INPUT_SIZE),
                                              dtype=np.float32))

    labels_path = os.path.join(out_dir, "labels.csv")
    with open(labels_path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(LABEL_HEADER + "\n")
        for rid in ids:
            fh.write(rid + "," * 15 + "\n")

    manifest = {
        "version": 1,
        "feature_dim": EMBEDDING_DIM,
        "logits_dim": LOGITS_DIM,
        "openface_dim": 0,
        "num_expr_classes": 8,
        "features_file": "features.csv",
        "labels_file": "labels.csv",
        "preprocessing": {
            "input_size": INPUT_SIZE,
            "super_resolution": job.super_resolution,
            "sr_scale": job.sr_scale if job.super_resolution else None,
        },
    }
    with open(job.out_manifest, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")

    report.exported = ids
    with open(os.path.join(out_dir, "export_report.json"), "w",
              encoding="utf-8", newline="\n") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    return report
