"""On-disk dataset format and loading.

A dataset is a manifest.json plus CSV tables:

* ``manifest.json`` - ``{"version": 1, "feature_dim": D, "logits_dim": 10,
  "openface_dim": 0 or 35, "num_expr_classes": C, "features_file": ...,
  "labels_file": ..., "openface_file": ...}``. File paths are relative to
  the manifest. An optional ``"counts"`` block is verified against the
  actual label counts at load time. Unknown keys are preserved.
* ``features.csv`` - header ``id,e0..e{D-1},l0..l9``. The 10 logit columns
  are the 8 backbone expression logits followed by its valence and arousal
  outputs.
* ``labels.csv`` - header ``id,expression,valence,arousal,au1,au2,au4,au6,
  au7,au10,au12,au15,au23,au24,au25,au26``. An empty field means the label
  is absent; valence/arousal must be present or absent together, and the
  12 AU fields are all present or all empty.
* ``openface.csv`` (optional) - header ``id,f0..f34``; ids are a subset of
  the feature ids, rows absent from it simply lack the descriptor.

Numbers use a '.' decimal point and no thousands separators. A loaded
Dataset is immutable and safe for concurrent readers.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

LOGITS_DIM = 10
NUM_AUS = 12
OPENFACE_DIM = 35

AU_COLUMNS = ("au1", "au2", "au4", "au6", "au7", "au10",
              "au12", "au15", "au23", "au24", "au25", "au26")
LABEL_HEADER = ("id", "expression", "valence", "arousal") + AU_COLUMNS

TASKS = ("expr", "va", "au", "expr_openface")


class DatasetError(ValueError):
    """Malformed manifest or data table."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class FeatureRecord:
    id: str
    embedding: np.ndarray
    logits: np.ndarray
    openface_aus: Optional[np.ndarray] = None


@dataclass(frozen=True)
class LabelSet:
    expression: Optional[int] = None
    valence: Optional[float] = None
    arousal: Optional[float] = None
    aus: Optional[np.ndarray] = None


@dataclass
class DatasetManifest:
    feature_dim: int
    num_expr_classes: int
    features_file: str
    labels_file: str
    openface_file: Optional[str] = None
    openface_dim: int = 0
    logits_dim: int = LOGITS_DIM
    version: int = 1
    counts: Optional[dict] = None
    extra: dict = field(default_factory=dict)


@dataclass
class Dataset:
    """Feature/label tables in file order; missing labels are encoded as
    -1 (expression, AUs) or NaN (valence/arousal) with boolean masks."""

    manifest: DatasetManifest
    ids: list[str]
    embeddings: np.ndarray          # n x feature_dim
    logits: np.ndarray              # n x 10
    expr: np.ndarray                # n, int64, -1 = absent
    va: np.ndarray                  # n x 2, NaN = absent (jointly)
    aus: np.ndarray                 # n x 12, int8, row of -1 = absent
    openface: Optional[np.ndarray]  # n x 35
    openface_mask: np.ndarray       # n, bool

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def expr_mask(self) -> np.ndarray:
        return self.expr >= 0

    @property
    def va_mask(self) -> np.ndarray:
        return ~np.isnan(self.va[:, 0])

    @property
    def au_mask(self) -> np.ndarray:
        return self.aus[:, 0] >= 0

    def record(self, i: int) -> tuple[FeatureRecord, LabelSet]:
        of = None
        if self.openface is not None and self.openface_mask[i]:
            of = self.openface[i]
        rec = FeatureRecord(id=self.ids[i], embedding=self.embeddings[i],
                            logits=self.logits[i], openface_aus=of)
        lab = LabelSet(
            expression=int(self.expr[i]) if self.expr[i] >= 0 else None,
            valence=float(self.va[i, 0]) if not np.isnan(self.va[i, 0]) else None,
            arousal=float(self.va[i, 1]) if not np.isnan(self.va[i, 1]) else None,
            aus=self.aus[i].copy() if self.aus[i, 0] >= 0 else None,
        )
        return rec, lab

    def __iter__(self) -> Iterator[tuple[FeatureRecord, LabelSet]]:
        for i in range(len(self)):
            yield self.record(i)

    @property
    def records(self) -> list[tuple[FeatureRecord, LabelSet]]:
        return list(self)


@dataclass(frozen=True)
class TaskView:
    """Positions of the records that carry the task's label."""

    task: str
    indices: np.ndarray


def task_view(ds: Dataset, task: str) -> TaskView:
    if task == "expr":
        mask = ds.expr_mask
    elif task == "va":
        mask = ds.va_mask
    elif task == "au":
        mask = ds.au_mask
    elif task == "expr_openface":
        mask = ds.expr_mask & ds.openface_mask
    else:
        raise ValueError(f"unknown task {task!r}, expected one of {TASKS}")
    return TaskView(task=task, indices=np.flatnonzero(mask))


def task_features(ds: Dataset, task: str, indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Model input matrix for a task: logits only for VA, embedding+logits
    for expression and AU heads, the 35-d descriptor for the aux head."""
    if indices is None:
        indices = np.arange(len(ds))
    if task == "va":
        return ds.logits[indices]
    if task in ("expr", "au"):
        return np.concatenate([ds.embeddings[indices], ds.logits[indices]], axis=1)
    if task == "expr_openface":
        if ds.openface is None:
            raise DatasetError("dataset has no openface descriptors")
        return ds.openface[indices]
    raise ValueError(f"unknown task {task!r}")


# --- construction -----------------------------------------------------------

def _computed_counts(ds: Dataset) -> dict:
    n_classes = ds.manifest.num_expr_classes
    present = ds.expr[ds.expr_mask]
    expr_classes = [int(np.sum(present == c)) for c in range(n_classes)]
    return {
        "expr": int(ds.expr_mask.sum()),
        "va": int(ds.va_mask.sum()),
        "au": int(ds.au_mask.sum()),
        "expr_openface": int((ds.expr_mask & ds.openface_mask).sum()),
        "expr_classes": expr_classes,
    }


def make_dataset(ids, embeddings, logits, expr, va, aus, openface=None,
                 openface_mask=None, num_expr_classes: int = 8,
                 features_file: str = "features.csv",
                 labels_file: str = "labels.csv") -> Dataset:
    """Assemble an in-memory Dataset from arrays (missing markers as in
    :class:`Dataset`), computing the manifest record."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    n = len(ids)
    if openface is not None and openface_mask is None:
        openface_mask = np.ones(n, dtype=bool)
    if openface is None:
        openface_mask = np.zeros(n, dtype=bool)
    manifest = DatasetManifest(
        feature_dim=int(embeddings.shape[1]),
        num_expr_classes=num_expr_classes,
        features_file=features_file,
        labels_file=labels_file,
        openface_file="openface.csv" if openface is not None else None,
        openface_dim=OPENFACE_DIM if openface is not None else 0,
    )
    ds = Dataset(manifest=manifest, ids=list(ids), embeddings=embeddings,
                 logits=np.asarray(logits, dtype=np.float64),
                 expr=np.asarray(expr, dtype=np.int64),
                 va=np.asarray(va, dtype=np.float64),
                 aus=np.asarray(aus, dtype=np.int8),
                 openface=openface if openface is None else np.asarray(openface, dtype=np.float64),
                 openface_mask=np.asarray(openface_mask, dtype=bool))
    ds.manifest.counts = _computed_counts(ds)
    report = validate_dataset(ds)
    if not report.ok:
        raise DatasetError("invalid dataset: " + "; ".join(report.issues))
    return ds


# --- loading ----------------------------------------------------------------

_REQUIRED_MANIFEST_KEYS = ("version", "feature_dim", "logits_dim",
                           "openface_dim", "num_expr_classes",
                           "features_file", "labels_file")


def _read_manifest(path: str) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise DatasetError(f"{path}: manifest must be a JSON object")
    missing = [k for k in _REQUIRED_MANIFEST_KEYS if k not in doc]
    if missing:
        raise DatasetError(f"{path}: manifest missing keys {missing}")
    if doc["version"] != 1:
        raise DatasetError(f"{path}: unsupported format version {doc['version']!r}")
    if doc["logits_dim"] != LOGITS_DIM:
        raise DatasetError(f"{path}: logits_dim must be {LOGITS_DIM}")
    if doc["openface_dim"] not in (0, OPENFACE_DIM):
        raise DatasetError(f"{path}: openface_dim must be 0 or {OPENFACE_DIM}")
    if doc["openface_dim"] == OPENFACE_DIM and not doc.get("openface_file"):
        raise DatasetError(f"{path}: openface_dim set but no openface_file")
    if int(doc["feature_dim"]) < 1 or int(doc["num_expr_classes"]) < 2:
        raise DatasetError(f"{path}: bad feature_dim or num_expr_classes")
    known = set(_REQUIRED_MANIFEST_KEYS) | {"openface_file", "counts"}
    extra = {k: v for k, v in doc.items() if k not in known}
    return DatasetManifest(
        feature_dim=int(doc["feature_dim"]),
        num_expr_classes=int(doc["num_expr_classes"]),
        features_file=doc["features_file"],
        labels_file=doc["labels_file"],
        openface_file=doc.get("openface_file"),
        openface_dim=int(doc["openface_dim"]),
        counts=doc.get("counts"),
        extra=extra,
    )


def _features_header(feature_dim: int) -> list[str]:
    return (["id"] + [f"e{i}" for i in range(feature_dim)]
            + [f"l{i}" for i in range(LOGITS_DIM)])


def _openface_header() -> list[str]:
    return ["id"] + [f"f{i}" for i in range(OPENFACE_DIM)]


def _parse_float(raw: str, rid: str, col: str, path: str) -> float:
    try:
        v = float(raw)
    except ValueError as exc:
        raise DatasetError(f"{path}: id {rid!r}, field {col!r}: not a number: {raw!r}") from exc
    if not np.isfinite(v):
        raise DatasetError(f"{path}: id {rid!r}, field {col!r}: non-finite value {raw!r}")
    return v


def _read_table(path: str, header: list[str]) -> tuple[list[str], np.ndarray]:
    """Numeric CSV keyed by a leading id column with a fixed header."""
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise DatasetError(f"{path}: bad header, expected {','.join(header[:3])},..."
                               f" got {','.join(got[:3]) if got else '<empty>'},...")
        ids: list[str] = []
        rows: list[list[float]] = []
        seen: set[str] = set()
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DatasetError(f"{path}: line {ln}: expected {len(header)} fields, got {len(row)}")
            rid = row[0]
            if rid in seen:
                raise DatasetError(f"{path}: duplicate id {rid!r}")
            seen.add(rid)
            ids.append(rid)
            rows.append([_parse_float(raw, rid, col, path)
                         for raw, col in zip(row[1:], header[1:])])
    data = np.asarray(rows, dtype=np.float64) if rows else np.zeros((0, len(header) - 1))
    return ids, data


def _parse_label_row(row: list[str], rid: str, path: str,
                     num_classes: int) -> tuple[int, float, float, np.ndarray]:
    expr_raw, val_raw, aro_raw = row[1], row[2], row[3]
    au_raw = row[4:]

    if expr_raw == "":
        expr = -1
    else:
        try:
            expr = int(expr_raw)
        except ValueError as exc:
            raise DatasetError(f"{path}: id {rid!r}, field 'expression': not an integer: {expr_raw!r}") from exc
        if not 0 <= expr < num_classes:
            raise DatasetError(f"{path}: id {rid!r}, field 'expression': "
                               f"value {expr} outside [0, {num_classes})")

    if (val_raw == "") != (aro_raw == ""):
        raise DatasetError(f"{path}: id {rid!r}: valence and arousal must be "
                           "present together or absent together")
    if val_raw == "":
        val, aro = np.nan, np.nan
    else:
        val = _parse_float(val_raw, rid, "valence", path)
        aro = _parse_float(aro_raw, rid, "arousal", path)
        if not -1.0 <= val <= 1.0:
            raise DatasetError(f"{path}: id {rid!r}, field 'valence': {val} outside [-1, 1]")
        if not -1.0 <= aro <= 1.0:
            raise DatasetError(f"{path}: id {rid!r}, field 'arousal': {aro} outside [-1, 1]")

    n_empty = sum(1 for x in au_raw if x == "")
    if n_empty == NUM_AUS:
        aus = np.full(NUM_AUS, -1, dtype=np.int8)
    elif n_empty == 0:
        aus = np.zeros(NUM_AUS, dtype=np.int8)
        for j, (raw, col) in enumerate(zip(au_raw, AU_COLUMNS)):
            if raw not in ("0", "1"):
                raise DatasetError(f"{path}: id {rid!r}, field {col!r}: AU value must be 0 or 1, got {raw!r}")
            aus[j] = int(raw)
    else:
        raise DatasetError(f"{path}: id {rid!r}: AU fields must be all present or all empty")
    return expr, val, aro, aus


def load_dataset(manifest_path) -> Dataset:
    """Load and fully check a dataset; the result passes validate_dataset."""
    manifest_path = os.fspath(manifest_path)
    manifest = _read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))

    feat_path = os.path.join(base, manifest.features_file)
    ids, feat = _read_table(feat_path, _features_header(manifest.feature_dim))
    embeddings = feat[:, :manifest.feature_dim]
    logits = feat[:, manifest.feature_dim:]

    labels_path = os.path.join(base, manifest.labels_file)
    try:
        fh = open(labels_path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise DatasetError(f"cannot read {labels_path}: {exc}") from exc
    n = len(ids)
    pos = {rid: i for i, rid in enumerate(ids)}
    expr = np.full(n, -1, dtype=np.int64)
    va = np.full((n, 2), np.nan)
    aus = np.full((n, NUM_AUS), -1, dtype=np.int8)
    seen: set[str] = set()
    with fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != list(LABEL_HEADER):
            raise DatasetError(f"{labels_path}: bad header")
        for ln, row in enumerate(reader, start=2):
            if len(row) != len(LABEL_HEADER):
                raise DatasetError(f"{labels_path}: line {ln}: expected {len(LABEL_HEADER)} fields")
            rid = row[0]
            if rid in seen:
                raise DatasetError(f"{labels_path}: duplicate id {rid!r}")
            seen.add(rid)
            if rid not in pos:
                raise DatasetError(f"{labels_path}: id {rid!r} not present in features table")
            i = pos[rid]
            expr[i], va[i, 0], va[i, 1], aus[i] = _parse_label_row(
                row, rid, labels_path, manifest.num_expr_classes)
    missing_labels = [rid for rid in ids if rid not in seen]
    if missing_labels:
        raise DatasetError(f"{labels_path}: no label row for id {missing_labels[0]!r} "
                           f"({len(missing_labels)} ids missing)")

    openface = None
    openface_mask = np.zeros(n, dtype=bool)
    if manifest.openface_file is not None:
        of_path = os.path.join(base, manifest.openface_file)
        of_ids, of_data = _read_table(of_path, _openface_header())
        openface = np.zeros((n, OPENFACE_DIM))
        for rid, rowvals in zip(of_ids, of_data):
            if rid not in pos:
                raise DatasetError(f"{of_path}: id {rid!r} not present in features table")
            openface[pos[rid]] = rowvals
            openface_mask[pos[rid]] = True

    ds = Dataset(manifest=manifest, ids=ids, embeddings=embeddings, logits=logits,
                 expr=expr, va=va, aus=aus, openface=openface,
                 openface_mask=openface_mask)
    computed = _computed_counts(ds)
    if manifest.counts is not None and manifest.counts != computed:
        raise DatasetError(f"{manifest_path}: manifest counts {manifest.counts} "
                           f"do not match data {computed}")
    manifest.counts = computed
    return ds


# --- saving -----------------------------------------------------------------

def save_dataset(ds: Dataset, manifest_path) -> None:
    """Write manifest + tables; reloading reproduces every value bit-for-bit."""
    manifest_path = os.fspath(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    os.makedirs(base, exist_ok=True)
    m = ds.manifest

    doc = {
        "version": 1,
        "feature_dim": m.feature_dim,
        "logits_dim": LOGITS_DIM,
        "openface_dim": m.openface_dim,
        "num_expr_classes": m.num_expr_classes,
        "features_file": m.features_file,
        "labels_file": m.labels_file,
        "counts": _computed_counts(ds),
    }
    if m.openface_file is not None:
        doc["openface_file"] = m.openface_file
    doc.update(m.extra)
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")

    with open(os.path.join(base, m.features_file), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_features_header(m.feature_dim)) + "\n")
        for i, rid in enumerate(ds.ids):
            vals = [_fmt(v) for v in ds.embeddings[i]] + [_fmt(v) for v in ds.logits[i]]
            fh.write(rid + "," + ",".join(vals) + "\n")

    with open(os.path.join(base, m.labels_file), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(LABEL_HEADER) + "\n")
        for i, rid in enumerate(ds.ids):
            expr = str(int(ds.expr[i])) if ds.expr[i] >= 0 else ""
            if np.isnan(ds.va[i, 0]):
                val = aro = ""
            else:
                val, aro = _fmt(ds.va[i, 0]), _fmt(ds.va[i, 1])
            if ds.aus[i, 0] >= 0:
                au_fields = [str(int(v)) for v in ds.aus[i]]
            else:
                au_fields = [""] * NUM_AUS
            fh.write(",".join([rid, expr, val, aro] + au_fields) + "\n")

    if m.openface_file is not None and ds.openface is not None:
        with open(os.path.join(base, m.openface_file), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(_openface_header()) + "\n")
            for i, rid in enumerate(ds.ids):
                if ds.openface_mask[i]:
                    fh.write(rid + "," + ",".join(_fmt(v) for v in ds.openface[i]) + "\n")


# --- validation -------------------------------------------------------------

@dataclass
class ValidationReport:
    ok: bool
    issues: list[str]
    task_counts: dict
    expr_class_counts: list[int]
    n_records: int

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "n_records": self.n_records,
            "task_counts": self.task_counts,
            "expr_class_counts": self.expr_class_counts,
            "issues": self.issues,
        }


def validate_dataset(ds: Dataset) -> ValidationReport:
    """Check every invariant; violations are reported, never raised."""
    issues: list[str] = []
    n = len(ds)
    m = ds.manifest

    if len(set(ds.ids)) != n:
        issues.append("duplicate record ids")
    if ds.embeddings.shape != (n, m.feature_dim):
        issues.append(f"embeddings shape {ds.embeddings.shape} != ({n}, {m.feature_dim})")
    if ds.logits.shape != (n, LOGITS_DIM):
        issues.append(f"logits shape {ds.logits.shape} != ({n}, {LOGITS_DIM})")
    if ds.embeddings.size and not np.isfinite(ds.embeddings).all():
        issues.append("non-finite embedding values")
    if ds.logits.size and not np.isfinite(ds.logits).all():
        issues.append("non-finite logit values")

    present = ds.expr[ds.expr_mask]
    if present.size and (present.min() < 0 or present.max() >= m.num_expr_classes):
        issues.append("expression label out of range")
    va_ok = np.isnan(ds.va[:, 0]) == np.isnan(ds.va[:, 1])
    if not va_ok.all():
        issues.append("valence/arousal present-together invariant violated")
    vp = ds.va[ds.va_mask]
    if vp.size and (np.abs(vp) > 1.0).any():
        issues.append("valence/arousal outside [-1, 1]")
    labeled_aus = ds.aus[ds.au_mask]
    if labeled_aus.size and not np.isin(labeled_aus, (0, 1)).all():
        issues.append("AU labels must be 0 or 1")
    if ds.openface is not None:
        if ds.openface.shape != (n, OPENFACE_DIM):
            issues.append(f"openface shape {ds.openface.shape} != ({n}, {OPENFACE_DIM})")
        elif ds.openface[ds.openface_mask].size and not np.isfinite(ds.openface[ds.openface_mask]).all():
            issues.append("non-finite openface values")

    computed = _computed_counts(ds)
    if m.counts is not None and m.counts != computed:
        issues.append(f"manifest counts {m.counts} != recomputed {computed}")

    return ValidationReport(
        ok=not issues,
        issues=issues,
        task_counts={k: computed[k] for k in ("expr", "va", "au", "expr_openface")},
        expr_class_counts=computed["expr_classes"],
        n_records=n,
    )
