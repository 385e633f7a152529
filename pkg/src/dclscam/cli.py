"""Command-line entry point: gen, train, explain, score, report.

stdout carries ``key=value`` lines; human-readable tables go to stderr or
``--out``.  Exit codes: 0 success, 2 usage or input error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import cam, datakit, evaluate, zoo

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
CLI_METHODS = {"gradcam": "gradcam", "tgradcam": "threshold_gradcam"}

log = logging.getLogger("dclscam")


class InputError(Exception):
    pass


def _emit(**kv):
    for k, v in kv.items():
        if isinstance(v, float):
            v = f"{v:.4f}"
        print(f"{k}={v}")


def _manifest(path):
    p = Path(path)
    return p / "manifest.jsonl" if p.is_dir() else p


def _load(path):
    try:
        return datakit.load_dataset(_manifest(path))
    except (OSError, datakit.FormatError) as exc:
        raise InputError(str(exc)) from None


def _load_model(path):
    try:
        return zoo.load_checkpoint(path)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot load checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    manifest = datakit.generate_shapes(args.n, args.size, args.classes, args.seed, args.out)
    _emit(manifest=manifest, n=args.n)
    return EXIT_OK


_TRAIN_FLAGS = {
    "arch": "arch", "epochs": "epochs", "lr": "lr", "pos_lr_mult": "pos_lr_mult", "interp": "interp",
    "seed": "seed", "batch_size": "batch_size", "kernel_size": "kernel_size",
    "elements": "dcls_elements", "val_fraction": "val_fraction",
}


def cmd_train(args):
    base = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            base[key] = value
    try:
        config = zoo.TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None
    samples = _load(args.data)
    train_set, val_set = zoo.split_dataset(samples, config.val_fraction)
    if not train_set:
        raise InputError("training split is empty")
    if max(s.label for s in samples) >= config.classes:
        raise InputError(f"dataset labels exceed the configured {config.classes} classes")
    model = zoo.build(config)
    try:
        tlog = zoo.train(model, train_set, config, val_set or None)
    except zoo.TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        _emit(status="diverged", step=exc.step)
        return EXIT_NUMERIC
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    zoo.save_checkpoint(model, out)
    log_path = Path(args.log) if args.log else Path(str(out) + ".trainlog.csv")
    tlog.write_csv(log_path)
    _emit(
        checkpoint=out,
        trainlog=log_path,
        params=model.param_count(),
        train_top1=zoo.top1(model, train_set),
        val_top1=zoo.top1(model, val_set) if val_set else "nan",
    )
    return EXIT_OK


def cmd_explain(args):
    model = _load_model(args.ckpt)
    try:
        image = datakit.read_image(args.image)
    except (OSError, datakit.FormatError) as exc:
        raise InputError(str(exc)) from None
    classes = model.config.classes
    if not 0 <= args.class_index < classes:
        raise InputError(f"class {args.class_index} out of range for {classes} classes")
    method = CLI_METHODS[args.method]
    if method == "gradcam":
        hm = cam.gradcam(model, image, args.class_index, target=args.target)
    else:
        hm = cam.threshold_gradcam(model, image, args.class_index, args.threshold, target=args.target)
    stem = Path(args.out)
    stem.parent.mkdir(parents=True, exist_ok=True)
    heat_path = stem.with_name(stem.name + ".pgm")
    over_path = stem.with_name(stem.name + "_overlay.png")
    datakit.write_pgm16(heat_path, hm.values)
    datakit.write_png(over_path, cam.overlay(image, hm, args.alpha))
    _emit(method=method, threshold=args.threshold if method != "gradcam" else "none",
          degenerate=str(hm.degenerate).lower(), heatmap=heat_path, overlay=over_path)
    return EXIT_OK


def cmd_score(args):
    model = _load_model(args.ckpt)
    samples = _load(args.data)
    if args.split != "all":
        train_set, val_set = zoo.split_dataset(samples, model.config.val_fraction)
        samples = val_set if args.split == "val" else train_set
    if not samples:
        raise InputError("no samples to score")
    methods = list(CLI_METHODS.values()) if args.method == "both" else [CLI_METHODS[args.method]]
    model_id = args.model_id or Path(args.ckpt).stem
    reports = []
    for method in methods:
        reports.append(evaluate.score_model(
            model, samples, method, args.threshold, model_id=model_id, target=args.target,
            class_source=args.class_source, blur=args.blur, workers=args.workers,
        ))
    csv_text, table = evaluate.emit_report(reports)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(csv_text)
    sys.stderr.write(table)
    for r in reports:
        _emit(model=r.model, method=r.method, top1=r.top1, mean_score=r.mean_score,
              n_images=r.n_images, n_degenerate=r.n_degenerate, params=r.params)
    _emit(csv=out)
    return EXIT_OK


def cmd_report(args):
    rows = []
    for path in args.inputs:
        try:
            rows.extend(evaluate.read_report_csv(path))
        except OSError as exc:
            raise InputError(str(exc)) from None
        except evaluate.ReportSchemaError as exc:
            raise InputError(f"schema mismatch: {exc}") from None
    table = evaluate.format_table(rows)
    if args.out:
        Path(args.out).write_text(table)
        _emit(table=args.out)
    else:
        sys.stderr.write(table)
    if args.csv:
        Path(args.csv).write_text(evaluate.rows_to_csv(rows))
        _emit(csv=args.csv)
    if args.figures:
        from . import plotting

        for p in plotting.render_all(rows, args.figures):
            _emit(figure=p)
    _emit(rows=len(evaluate.pivot_rows(rows)))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _unit_interval(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def build_parser():
    p = argparse.ArgumentParser(prog="dclscam", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate the synthetic shapes dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--classes", type=int, default=3, choices=range(2, len(datakit.SHAPES) + 1))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON TrainConfig; flags override its values")
    t.add_argument("--arch", choices=zoo.ARCHS[:4])
    t.add_argument("--data", required=True, help="manifest file or dataset directory")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--pos-lr-mult", type=float)
    t.add_argument("--interp", choices=("bilinear", "gaussian"))
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--kernel-size", type=int)
    t.add_argument("--elements", type=int, help="DCLS elements per channel")
    t.add_argument("--val-fraction", type=_unit_interval)
    t.add_argument("--log", help="TrainLog CSV path (default: <out>.trainlog.csv)")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="write a heatmap and overlay for one image")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--image", required=True)
    e.add_argument("--class", dest="class_index", type=int, required=True)
    e.add_argument("--method", choices=tuple(CLI_METHODS), default="tgradcam")
    e.add_argument("--threshold", type=_unit_interval, default=cam.DEFAULT_THRESHOLD)
    e.add_argument("--target", choices=("logit", "softmax"), default="logit")
    e.add_argument("--alpha", type=_unit_interval, default=0.5)
    e.add_argument("--out", required=True, help="output stem; writes <out>.pgm and <out>_overlay.png")
    e.set_defaults(func=cmd_explain)

    s = sub.add_parser("score", help="score heatmap alignment against reference maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--method", choices=tuple(CLI_METHODS) + ("both",), default="both")
    s.add_argument("--threshold", type=_unit_interval, default=cam.DEFAULT_THRESHOLD)
    s.add_argument("--target", choices=("logit", "softmax"), default="logit")
    s.add_argument("--class-source", choices=("label", "predicted"), default="label")
    s.add_argument("--blur", type=float, default=0.0, help="Gaussian blur sigma on model heatmaps")
    s.add_argument("--split", choices=("all", "train", "val"), default="all")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--model-id")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_score)

    r = sub.add_parser("report", help="merge score CSVs into a per-model comparison table")
    r.add_argument("--in", dest="inputs", nargs="+", required=True)
    r.add_argument("--out", help="formatted table path (default: stderr)")
    r.add_argument("--csv", help="also write the merged CSV here")
    r.add_argument("--figures", help="directory for comparison and size-vs-score figures")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
