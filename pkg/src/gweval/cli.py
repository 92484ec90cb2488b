"""``gweval`` command line.

Exit statuses: 0 success, 2 format error, 3 input-domain error, 4 configuration
error (including bad command-line usage).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .augment import Sample, encode_ppm, load_augment_config, read_ppm, run_pipeline
from .errors import ConfigError, FormatError, GwevalError, InputDomainError
from .fusion import FusionConfig, TTAPredictionSet, pseudo_label, tta_merge
from .geometry import CanvasSize, TTATransform
from .ingest import (
    GroundTruthSet,
    ImageAnnotation,
    PredictionSet,
    parse_canvases,
    parse_domain_manifest,
    parse_ground_truth,
    parse_submission,
    serialize_ground_truth,
    serialize_submission,
)
from .matching import DEFAULT_THRESHOLDS, parse_threshold_range
from .metrics import anova_domains, evaluate
from .ranking import evaluate_submission, rank_delta, rank_table
from .report import (
    ReportDocument,
    delta_to_dict,
    evaluation_payload,
    images_from_payload,
    table_to_dict,
)

log = logging.getLogger("gweval")

EXIT_OK = 0
EXIT_FORMAT = FormatError.exit_status
EXIT_DOMAIN = InputDomainError.exit_status
EXIT_CONFIG = ConfigError.exit_status


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _read_text(path) -> str:
    with open(path, encoding="utf-8-sig", newline="") as fh:
        return fh.read()


def _write_atomic(path, data) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_gt(path) -> GroundTruthSet:
    return parse_ground_truth(_read_text(path), variant=Path(path).name, name=os.fspath(path))


def _load_submission(path, name: Optional[str] = None) -> PredictionSet:
    return parse_submission(_read_text(path), name=name or Path(path).stem, source_name=os.fspath(path))


def _load_domains(path):
    return parse_domain_manifest(_read_text(path), name=os.fspath(path))


def _echo(argv: Sequence[str], drop: Sequence[str] = ()) -> list[str]:
    """Command echo with the values of ``drop`` options removed."""
    out, skip = [], False
    for tok in argv:
        if skip:
            skip = False
            continue
        if tok in drop:
            skip = True
            continue
        if any(tok.startswith(d + "=") for d in drop):
            continue
        out.append(tok)
    return out


# commands ------------------------------------------------------------------------------------


def cmd_evaluate(args, argv) -> int:
    thresholds = DEFAULT_THRESHOLDS
    if args.thresholds:
        try:
            thresholds = parse_threshold_range(args.thresholds)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    doc = ReportDocument(command=list(argv), payload_type="evaluation", payload={})
    for p in (args.gt, args.pred, args.domains):
        doc.add_input(p)
    gt = _load_gt(args.gt)
    preds = _load_submission(args.pred)
    domains = _load_domains(args.domains)
    report = evaluate(gt, preds, domains, thresholds, retain_pairs=args.retain_pairs)
    doc.payload = evaluation_payload(report)
    doc.warnings = dict(report.warnings)
    _write_atomic(args.out, doc.dumps())
    print(f"kaggle_accuracy={report.kaggle_accuracy:.6f} weighted_accuracy={report.weighted_accuracy:.6f} "
          f"n={report.n} D={report.D}")
    return EXIT_OK


def _read_manifest(path) -> list[tuple[str, Path]]:
    base = Path(path).parent
    rows = []
    reader = csv.reader(_read_text(path).splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["name", "path"]:
        raise FormatError("bad header, expected name,path", line=1, source=os.fspath(path))
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2 or not row[0].strip() or not row[1].strip():
            raise FormatError("expected name,path", line=line, source=os.fspath(path))
        p = Path(row[1].strip())
        rows.append((row[0].strip(), p if p.is_absolute() else base / p))
    if not rows:
        raise InputDomainError(f"{path}: manifest lists no submissions")
    return rows


def cmd_rank(args, argv) -> int:
    doc = ReportDocument(command=list(argv), payload_type="ranking", payload={})
    for p in (args.manifest, args.gt, args.domains):
        doc.add_input(p)
    entries = _read_manifest(args.manifest)
    gt = _load_gt(args.gt)
    domains = _load_domains(args.domains)
    scores = []
    warnings: Counter = Counter()
    for name, path in entries:
        doc.add_input(path)
        s = evaluate_submission(_load_submission(path, name), gt, domains)
        warnings.update({f"{name}:{k}": v for k, v in s.warnings.items()})
        scores.append(s)
    kaggle = rank_table(scores, "kaggle")
    weighted = rank_table(scores, "weighted")
    doc.payload = {
        "submissions": [
            {"name": s.name, "kaggle_accuracy": s.kaggle_accuracy, "weighted_accuracy": s.weighted_accuracy}
            for s in sorted(scores, key=lambda s: s.name)
        ],
        "tables": {"kaggle": table_to_dict(kaggle), "weighted": table_to_dict(weighted)},
        "delta": {"from": "kaggle", "to": "weighted", **delta_to_dict(rank_delta(kaggle, weighted))},
    }
    doc.warnings = dict(warnings)
    _write_atomic(args.out, doc.dumps())
    for row in weighted.rows:
        print(f"{row.rank:>4}  {row.name}  weighted={row.score:.6f}  kaggle_rank={kaggle.rank_of(row.name)}")
    return EXIT_OK


def _load_fusion_config(path) -> tuple[FusionConfig, dict]:
    if path is None:
        return FusionConfig(), {}
    try:
        doc = json.loads(_read_text(path))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: fusion config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: fusion config must be a JSON object")
    known = {"iou_threshold", "weights", "score_mode", "cull_threshold", "canvases", "default_canvas"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"{path}: unknown fusion config keys {sorted(unknown)}")
    try:
        cfg = FusionConfig(
            iou_threshold=float(doc.get("iou_threshold", 0.55)),
            weights=tuple(float(w) for w in doc["weights"]) if doc.get("weights") is not None else None,
            score_mode=str(doc.get("score_mode", "mean")),
            cull_threshold=float(doc.get("cull_threshold", 0.0)),
        )
    except InputDomainError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: invalid fusion config: {exc}") from None
    return cfg, doc


def _read_sidecar(path) -> dict[str, TTATransform]:
    out = {}
    reader = csv.reader(_read_text(path).splitlines())
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != ["variant", "transform"]:
        raise FormatError("bad header, expected variant,transform", line=1, source=os.fspath(path))
    for line, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 2:
            raise FormatError("expected variant,transform", line=line, source=os.fspath(path))
        try:
            out[row[0].strip()] = TTATransform(row[1].strip())
        except ValueError:
            known = ", ".join(t.value for t in TTATransform)
            raise FormatError(f"unknown transform {row[1]!r} (known: {known})", line=line, source=os.fspath(path))
    return out


def _variant_transform(sidecar: dict[str, TTATransform], path: str) -> TTATransform:
    p = Path(path)
    for key in (path, p.name, p.stem):
        if key in sidecar:
            return sidecar[key]
    raise InputDomainError(f"variants sidecar names no transform for input {path}")


def cmd_fuse(args, argv) -> int:
    doc = ReportDocument(command=list(argv), payload_type="fusion", payload={})
    for p in [*args.inputs, args.variants] + ([args.config] if args.config else []):
        doc.add_input(p)
    cfg, raw = _load_fusion_config(args.config)
    canvases: dict[str, CanvasSize] = {}
    canvas_path = args.canvases or raw.get("canvases")
    if canvas_path:
        canvas_path = Path(canvas_path)
        if not canvas_path.is_absolute() and args.config and not args.canvases:
            canvas_path = Path(args.config).parent / canvas_path
        doc.add_input(canvas_path)
        canvases = parse_canvases(_read_text(canvas_path), name=os.fspath(canvas_path))
    default_canvas = raw.get("default_canvas")
    sidecar = _read_sidecar(args.variants)
    warnings: Counter = Counter()
    variants = []
    for path in args.inputs:
        if os.path.getsize(path) == 0:
            warnings["empty_input_files"] += 1
            log.warning("%s is empty; treating it as a submission with no images", path)
            preds = PredictionSet(Path(path).stem, {})
        else:
            preds = _load_submission(path)
        warnings.update(preds.warnings)
        if not preds.images:
            warnings["inputs_without_images"] += 1
        image_canvases = dict(canvases)
        if default_canvas is not None:
            for image_id in preds.images:
                image_canvases.setdefault(image_id, CanvasSize(*default_canvas))
        variants.append(TTAPredictionSet(_variant_transform(sidecar, path), image_canvases, preds.images, name=path))
    fused = tta_merge(variants, cfg, name=Path(args.out).stem)
    _write_atomic(args.out, serialize_submission(fused))
    per_image = [
        {
            "image_id": image_id,
            "boxes_in": [len(v.images[image_id]) for v in variants],
            "boxes_out": len(fused.images[image_id]),
        }
        for image_id in sorted(fused.images)
    ]
    doc.payload = {
        "output": os.fspath(args.out),
        "config": {
            "iou_threshold": cfg.iou_threshold,
            "weights": list(cfg.weights) if cfg.weights else None,
            "score_mode": cfg.score_mode,
            "cull_threshold": cfg.cull_threshold,
        },
        "variants": [{"path": v.name, "transform": v.transform.value} for v in variants],
        "images": per_image,
        "boxes_in": sum(sum(r["boxes_in"]) for r in per_image),
        "boxes_out": sum(r["boxes_out"] for r in per_image),
    }
    doc.warnings = dict(warnings)
    _write_atomic(args.report or f"{args.out}.report.json", doc.dumps())
    print(f"fused {len(variants)} variants over {len(per_image)} images: "
          f"{doc.payload['boxes_in']} boxes in, {doc.payload['boxes_out']} out")
    return EXIT_OK


def cmd_pseudo_label(args, argv) -> int:
    doc = ReportDocument(command=list(argv), payload_type="pseudo-label", payload={})
    for p in (args.pred, args.canvases):
        doc.add_input(p)
    preds = _load_submission(args.pred)
    canvases = parse_canvases(_read_text(args.canvases), name=os.fspath(args.canvases))
    domains = {}
    if args.domains:
        doc.add_input(args.domains)
        domains = _load_domains(args.domains)
    labels = pseudo_label(preds, args.conf_thr, canvases)
    _write_atomic(args.out, serialize_ground_truth(labels, domains))
    n_in = sum(len(v) for v in preds.images.values())
    n_out = sum(len(a.boxes) for a in labels.images.values())
    doc.payload = {"output": os.fspath(args.out), "confidence_threshold": args.conf_thr,
                   "detections_in": n_in, "boxes_out": n_out, "images": len(labels.images)}
    doc.warnings = dict(preds.warnings + labels.warnings)
    _write_atomic(args.report or f"{args.out}.report.json", doc.dumps())
    print(f"kept {n_out} of {n_in} detections at confidence >= {args.conf_thr}")
    return EXIT_OK


def cmd_augment(args, argv) -> int:
    images_dir = Path(args.images)
    out_dir = Path(args.out)
    doc = ReportDocument(command=_echo(argv, ("--out",)), payload_type="augment", payload={})
    doc.add_input(args.ann)
    doc.add_input(args.config)
    cfg, config_seed = load_augment_config(_read_text(args.config))
    seed = args.seed if args.seed is not None else config_seed
    if seed is None:
        raise ConfigError("no seed given on the command line or in the config")
    gt = _load_gt(args.ann)
    ids = sorted(gt.images)
    if not ids:
        raise InputDomainError(f"{args.ann}: no images listed")
    samples = []
    for image_id in ids:
        path = images_dir / f"{image_id}.ppm"
        try:
            pixels = read_ppm(path)
        except OSError as exc:
            raise InputDomainError(f"cannot read image {path}: {exc.strerror or exc}") from None
        except FormatError as exc:
            raise FormatError(f"image {path}: {exc}") from None
        canvas = gt.images[image_id].canvas
        if (pixels.shape[1], pixels.shape[0]) != tuple(canvas):
            raise InputDomainError(
                f"image {path} is {pixels.shape[1]}x{pixels.shape[0]} but annotations say {canvas.width}x{canvas.height}"
            )
        doc.add_input(path)
        samples.append(Sample(pixels, gt.images[image_id].boxes))
    batch_size = cfg.batch_size or len(samples)
    audit: list = []
    outputs: list[Sample] = []
    for start in range(0, len(samples), batch_size):
        outputs.extend(run_pipeline(samples[start : start + batch_size], cfg, seed, audit=audit, index_offset=start))
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    images = {}
    for image_id, s in zip(ids, outputs):
        _write_atomic(out_dir / "images" / f"{image_id}.ppm", encode_ppm(s.pixels))
        images[image_id] = ImageAnnotation(s.size, tuple(sorted(s.boxes)))
    out_gt = GroundTruthSet(images=images, variant="augmented", domains=gt.domains)
    _write_atomic(out_dir / "annotations.csv", serialize_ground_truth(out_gt))
    doc.payload = {
        "seed": seed,
        "batch_size": batch_size,
        "samples": [
            {"image_id": image_id, "index": i, "boxes_in": len(samples[i].boxes), "boxes_out": len(outputs[i].boxes),
             "size": list(outputs[i].size), "stages": audit[i]}
            for i, image_id in enumerate(ids)
        ],
    }
    doc.warnings = dict(gt.warnings)
    _write_atomic(out_dir / "manifest.json", doc.dumps())
    applied = sum(1 for rec in audit for st in rec if st["applied"])
    print(f"augmented {len(outputs)} images ({applied} stage applications) into {out_dir}")
    return EXIT_OK


def _write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _write_atomic(path, buf.getvalue())


def cmd_analyze(args, argv) -> int:
    doc = ReportDocument.loads(_read_text(args.report))
    if doc.payload_type != "evaluation":
        raise InputDomainError(f"{args.report} is a {doc.payload_type} report, expected an evaluation report")
    payload = doc.payload
    if not payload.get("pairs_retained"):
        raise InputDomainError(f"{args.report} has no pair data; re-run evaluate with --retain-pairs")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    domains = payload["domains"]
    _write_csv(out / "domain_scatter.csv", ["domain", "n", "mean_accuracy", "std_accuracy"],
               [[d["domain"], d["n"], repr(d["mean_accuracy"]), repr(d["std_accuracy"])] for d in domains])
    _write_csv(out / "domain_rates.csv", ["domain", "missed_rate", "false_positive_rate", "flags"],
               [[d["domain"], repr(d["missed_rate"]), repr(d["false_positive_rate"]), ";".join(d["flags"])]
                for d in domains])
    h = payload["size_histogram"]
    edges = h["edges"]
    _write_csv(out / "size_histogram.csv", ["bin_lo", "bin_hi", "all", "missed"],
               [[repr(edges[i]), repr(edges[i + 1]), h["all"][i], h["missed"][i]] for i in range(len(h["all"]))])
    _write_csv(out / "size_summary.csv", ["median_ratio"],
               [["" if h["median_ratio"] is None else repr(h["median_ratio"])]])
    scores = images_from_payload(payload)
    try:
        result = anova_domains(scores)
    except InputDomainError as exc:
        raise type(exc)(f"ANOVA refused ({exc}); other plot data was written to {out}") from None
    _write_csv(out / "anova.csv", ["f_statistic", "df_between", "df_within", "p_value"],
               [[repr(result.f_statistic), result.df_between, result.df_within, repr(result.p_value)]])
    print(f"wrote plot data for {len(domains)} domains to {out}; ANOVA F={result.f_statistic:.4g} p={result.p_value:.4g}")
    return EXIT_OK


# entry point ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gweval", description="Domain-aware detection evaluation, fusion and augmentation.")
    parser.add_argument("--version", action="version", version=f"gweval {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings for every dropped or clipped box")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("evaluate", help="score a submission against ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--domains", required=True)
    p.add_argument("--thresholds", help="start:stop:step (inclusive) or comma list; default 0.5:0.75:0.05")
    p.add_argument("--retain-pairs", action="store_true", help="keep matched pairs (needed by analyze)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("rank", help="rank several submissions under both metrics")
    p.add_argument("--manifest", required=True, help="name,path table of submission files")
    p.add_argument("--gt", required=True)
    p.add_argument("--domains", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("fuse", help="merge TTA variants with weighted boxes fusion")
    p.add_argument("--inputs", required=True, nargs="+")
    p.add_argument("--variants", required=True, help="variant,transform sidecar")
    p.add_argument("--config", help="JSON fusion config")
    p.add_argument("--canvases", help="image_id,width,height table (overrides the config entry)")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("augment", help="run the augmentation pipeline over PPM images")
    p.add_argument("--images", required=True)
    p.add_argument("--ann", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("pseudo-label", help="promote confident predictions to labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--conf-thr", required=True, type=float)
    p.add_argument("--canvases", required=True)
    p.add_argument("--domains")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("analyze", help="export plot data from an evaluation report")
    p.add_argument("--report", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.verbose else logging.ERROR, format="%(levelname)s: %(message)s")
    try:
        return args.func(args, argv)
    except GwevalError as exc:
        print(f"gweval {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"gweval {args.command}: cannot access {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
