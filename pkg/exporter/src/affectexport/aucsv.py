"""Convert an external AU-descriptor CSV into the 35-column openface.csv.

The input must carry an image-id column (``id``, or one of the usual
batch-output names, whose values are reduced to the filename stem) and
exactly 35 AU columns named like ``AU01_r`` / ``AU04_c`` (leading spaces
tolerated). Everything else (pose, gaze, eye landmarks, timestamps) is
dropped. Output rows are sorted by id.
"""

from __future__ import annotations

import csv
import json
import os
import re
from dataclasses import dataclass, field
from typing import Optional

AU_COLUMN_RE = re.compile(r"^AU\d+_[rc]$")
EXPECTED_AU_COLUMNS = 35
ID_COLUMN_CANDIDATES = ("id", "input", "filename", "file", "face_id")


class ConversionError(ValueError):
    pass


@dataclass
class ConversionReport:
    written: int = 0
    mismatched_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"written": self.written, "mismatched_ids": self.mismatched_ids}


def _feature_ids(features_csv: str) -> set[str]:
    with open(features_csv, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise ConversionError(f"{features_csv}: expected an id-keyed features table")
        return {row[0] for row in reader if row}


def _stem(value: str) -> str:
    return os.path.splitext(os.path.basename(value))[0]


def convert_au_csv(in_path: str, out_path: str,
                   features_csv: Optional[str] = None) -> ConversionReport:
    """Project the AU columns into openface.csv; ids absent from the
    features table are excluded and listed in the returned report (also
    written next to the output as <out>.mismatch.json when non-empty)."""
    try:
        fh = open(in_path, "r", encoding="utf-8", newline="")
    except OSError as exc:
        raise ConversionError(f"cannot read {in_path}: {exc}") from exc

    report = ConversionReport()
    with fh:
        reader = csv.reader(fh)
        raw_header = next(reader, None)
        rows_out: list[tuple[str, list[str]]] = []
        if raw_header is None:
            header = []
            au_positions: list[int] = []
            id_pos = None
        else:
            header = [h.strip() for h in raw_header]
            au_positions = [i for i, h in enumerate(header) if AU_COLUMN_RE.match(h)]
            id_pos = next((header.index(c) for c in ID_COLUMN_CANDIDATES
                           if c in header), None)
            if len(au_positions) != EXPECTED_AU_COLUMNS:
                raise ConversionError(
                    f"{in_path}: found {len(au_positions)} AU columns, "
                    f"need exactly {EXPECTED_AU_COLUMNS}")
            if id_pos is None:
                raise ConversionError(
                    f"{in_path}: no id column (looked for {ID_COLUMN_CANDIDATES})")
            known = _feature_ids(features_csv) if features_csv else None
            for row in reader:
                if not row:
                    continue
                rid = _stem(row[id_pos].strip())
                if known is not None and rid not in known:
                    report.mismatched_ids.append(rid)
                    continue
                rows_out.append((rid, [row[i].strip() for i in au_positions]))

    rows_out.sort(key=lambda r: r[0])
    parent = os.path.dirname(os.path.abspath(out_path))
    os.makedirs(parent, exist_ok=True)
    with open(out_path, "w", encoding="utf-8", newline="\n") as out:
        out.write(",".join(["id"] + [f"f{i}" for i in range(EXPECTED_AU_COLUMNS)]) + "\n")
        for rid, vals in rows_out:
            out.write(rid + "," + ",".join(vals) + "\n")
    report.written = len(rows_out)

    if report.mismatched_ids:
        with open(out_path + ".mismatch.json", "w", encoding="utf-8", newline="\n") as mh:
            json.dump(report.to_dict(), mh, indent=2)
            mh.write("\n")
    return report
