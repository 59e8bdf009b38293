"""Command-line entry point for the feature exporter."""

from __future__ import annotations

import argparse
import sys

from .aucsv import ConversionError, convert_au_csv
from .export import ExportError, ExportJob, export_features


def cmd_export(args) -> int:
    job = ExportJob(
        image_dir=args.images,
        model_file=args.model,
        out_manifest=args.out,
        super_resolution=args.sr,
        sr_command=args.sr_cmd,
        sr_scale=args.sr_scale,
        batch_size=args.batch_size,
    )
    report = export_features(job)
    print(f"exported {len(report.exported)} records -> {args.out}")
    for entry in report.skipped:
        print(f"warning: skipped {entry['id']}: {entry['reason']}", file=sys.stderr)
    return 0


def cmd_convert_au(args) -> int:
    report = convert_au_csv(args.in_path, args.out, features_csv=args.features)
    print(f"wrote {report.written} descriptor rows -> {args.out}")
    if report.written == 0:
        print("warning: no descriptor rows written", file=sys.stderr)
    if report.mismatched_ids:
        print(f"warning: {len(report.mismatched_ids)} ids not present in the "
              f"features table (see {args.out}.mismatch.json)", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affectexport")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("export", help="extract embeddings/logits from images")
    p.add_argument("--images", required=True, help="directory of input images")
    p.add_argument("--model", required=True, help="TorchScript backbone graph file")
    p.add_argument("--out", required=True, help="output manifest.json path")
    p.add_argument("--sr", action="store_true",
                   help="run an external super-resolution command first")
    p.add_argument("--sr-cmd", dest="sr_cmd",
                   help="command template with {input} {output} {scale}")
    p.add_argument("--sr-scale", dest="sr_scale", type=int, default=2)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=16)
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("convert-au", help="project an AU CSV into openface.csv")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--features", help="features.csv to align ids against")
    p.set_defaults(fn=cmd_convert_au)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ExportError, ConversionError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
