"""Command line entry point: ``suturenet {synth,train,eval,decode,curves}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import dataio, evaluation, synthgen, trainer
from . import heatmap as hm

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "SUTURENET_THREADS"

logger = logging.getLogger("suturenet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _suture_range(text):
    try:
        lo, hi = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO:HI, got {text!r}") from None
    return lo, hi


def build_parser():
    p = _Parser(prog="suturenet", description="Variable-count suture landmark detection.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS thread count (default: ${THREADS_ENV} or library default); 1 is bit-reproducible")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--surgeries", type=int, required=True, help="number of surgeries")
    s.add_argument("--frames", type=int, required=True, help="frames per surgery")
    s.add_argument("--seed", type=int, required=True, help="generator seed")
    s.add_argument("--sutures", type=_suture_range, default=(8, 16), help="suture count range LO:HI (default 8:16)")
    s.add_argument("--width", type=int, default=512, help="frame width (default 512)")
    s.add_argument("--height", type=int, default=288, help="frame height (default 288)")

    t = sub.add_parser("train", help="surgery-level k-fold cross-validation training")
    t.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    t.add_argument("--folds", type=int, required=True, help="number of folds k")
    t.add_argument("--config", required=True, help="run configuration (JSON)")
    t.add_argument("--out", required=True, help="output directory")

    e = sub.add_parser("eval", help="threshold sweep of one checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    e.add_argument("--split", choices=("validation", "all"), default="validation",
                   help="frames to evaluate: the checkpoint's validation surgeries or every cv frame")
    e.add_argument("--thresholds", default="0.05:1.0:0.05", help="start:end:step, inclusive (default 0.05:1.0:0.05)")
    e.add_argument("--csv", required=True, help="output curve CSV")

    d = sub.add_parser("decode", help="detect points in one image or heatmap")
    d.add_argument("--image", help="input RGB image")
    src = d.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="checkpoint used to predict the heatmap")
    src.add_argument("--heatmap", help="precomputed foreground map (.npy or 8-bit grayscale image)")
    d.add_argument("--threshold", type=float, default=0.5, help="binarisation threshold (default 0.5)")
    d.add_argument("--out", required=True, help="output points file (JSON)")
    d.add_argument("--annotation", help="ground-truth labelme annotation for overlay colouring")
    d.add_argument("--overlay", help="optional overlay image path")
    d.add_argument("--heatmap-out", help="optional 8-bit grayscale export of the foreground map")

    c = sub.add_parser("curves", help="aggregate per-fold curves of a training run")
    c.add_argument("--run", required=True, help="output directory of 'train'")
    c.add_argument("--manifest", required=True, help="dataset manifest (JSON)")
    c.add_argument("--thresholds", default="0.05:1.0:0.05", help="start:end:step, inclusive")
    c.add_argument("--csv", required=True, help="output curve CSV")
    return p


# ----------------------------------------------------------------------
# commands


def run_synth(args):
    lo, hi = args.sutures
    if args.surgeries < 1 or args.frames < 1:
        raise UsageError("--surgeries and --frames must be positive")
    try:
        cfg = synthgen.PhantomConfig(width=args.width, height=args.height, sutures=(lo, hi), seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    _, path = synthgen.generate_dataset(cfg, args.surgeries, args.frames, args.out)
    print(path)


def run_train(args):
    manifest = dataio.DatasetManifest.load(args.manifest)
    try:
        config = trainer.TrainConfig.load(args.config)
    except (ValueError, TypeError) as exc:
        raise UsageError(f"invalid config {args.config}: {exc}") from None
    n = len({e.surgery_id for e in manifest.select(usage="cv")})
    if args.folds < 2 or args.folds > n:
        raise UsageError(f"--folds must be between 2 and the number of surgeries ({n}), got {args.folds}")
    os.makedirs(args.out, exist_ok=True)
    result = trainer.run_cv(manifest, args.folds, config, out_dir=args.out)
    for i, rec in enumerate(result.records):
        print(f"fold {i}: best epoch {rec.best_epoch}, val loss {result.checkpoints[i].val_loss:.6f}")
    print(os.path.join(args.out, "summary.json"))


def _thresholds(text):
    try:
        return evaluation.parse_threshold_range(text)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _evaluate_checkpoint(ckpt, manifest, surgeries):
    cfg = ckpt.unet_config
    entries = manifest.select(surgeries, usage="cv")
    if not entries:
        raise RuntimeError("no frames selected for evaluation")
    samples = dataio.load_samples(manifest, entries, (cfg.input_width, cfg.input_height))
    heatmaps = trainer.predict_heatmaps(ckpt.model(), [s.image for s in samples])
    return heatmaps, [s.landmarks for s in samples]


def run_eval(args):
    thresholds = _thresholds(args.thresholds)
    ckpt = trainer.Checkpoint.load(args.checkpoint)
    manifest = dataio.DatasetManifest.load(args.manifest)
    surgeries = None
    if args.split == "validation":
        surgeries = ckpt.metadata.get("validation_surgeries")
        if not surgeries:
            raise UsageError("checkpoint records no validation surgeries; use --split all")
    heatmaps, gts = _evaluate_checkpoint(ckpt, manifest, surgeries)
    curve = evaluation.sweep([(heatmaps, gts)], thresholds)
    evaluation.write_curve_csv(curve, args.csv)
    print(args.csv)


def run_curves(args):
    thresholds = _thresholds(args.thresholds)
    with open(os.path.join(args.run, "summary.json")) as fh:
        summary = json.load(fh)
    manifest = dataio.DatasetManifest.load(args.manifest)
    counts = []
    for fold in summary["folds"]:
        ckpt = trainer.Checkpoint.load(os.path.join(args.run, fold["checkpoint"]))
        heatmaps, gts = _evaluate_checkpoint(ckpt, manifest, fold["validation_surgeries"])
        counts.append(evaluation.fold_counts(heatmaps, gts, thresholds))
    evaluation.write_curve_csv(evaluation.aggregate(counts, thresholds), args.csv)
    print(args.csv)


OVERLAY_COLORS = {"tp": (0, 200, 0), "fp": (220, 0, 0), "fn": (255, 165, 0)}


def overlay_categories(points, gt, radius=evaluation.MATCH_RADIUS):
    """Split detections and ground truth into TP/FP/FN point lists for drawing."""
    res = evaluation.match(points, gt, radius)
    points, gt = hm.as_points(points), hm.as_points(gt)
    return {
        "tp": [tuple(points[p]) for p, _, _ in res.tp_pairs],
        "fp": [tuple(points[i]) for i in res.fp],
        "fn": [tuple(gt[j]) for j in res.fn],
    }


def draw_overlay(image, categories, path, radius=6):
    from PIL import Image, ImageDraw

    arr = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    im = Image.fromarray(arr)
    draw = ImageDraw.Draw(im)
    for kind, pts in categories.items():
        for x, y in pts:
            draw.ellipse([x - radius, y - radius, x + radius, y + radius], outline=OVERLAY_COLORS[kind], width=2)
    im.save(path)


def run_decode(args):
    threshold = args.threshold
    if not 0.0 < threshold <= 1.0:
        raise UsageError(f"--threshold must be in (0, 1], got {threshold}")
    image = None
    if args.image is not None:
        image = dataio.load_image(args.image)
    if args.checkpoint is not None:
        if image is None:
            raise UsageError("--checkpoint mode needs --image")
        ckpt = trainer.Checkpoint.load(args.checkpoint)
        cfg = ckpt.unet_config
        want = (cfg.input_height, cfg.input_width)
        if image.shape[:2] != want:
            raise UsageError(f"image is {image.shape[1]}x{image.shape[0]}, checkpoint expects "
                             f"{cfg.input_width}x{cfg.input_height} (W x H)")
        fg = trainer.predict_heatmaps(ckpt.model(), [image])[0]
    else:
        fg = hm.load_heatmap(args.heatmap)
        if image is not None and image.shape[:2] != fg.shape:
            raise UsageError(f"image is {image.shape[1]}x{image.shape[0]} but heatmap is {fg.shape[1]}x{fg.shape[0]}")
    points = hm.decode(fg, threshold)
    doc = {"threshold": threshold, "points": [{"x": float(x), "y": float(y)} for x, y in points]}
    if args.annotation:
        with open(args.annotation, encoding="utf-8") as fh:
            gt = dataio.parse_annotation(fh.read(), source=args.annotation).landmarks()
        cats = overlay_categories(points, gt)
        doc["matches"] = {k: [[float(x), float(y)] for x, y in v] for k, v in cats.items()}
    else:
        cats = {"tp": [], "fp": [tuple(p) for p in points], "fn": []}
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    if args.heatmap_out:
        hm.save_png(fg, args.heatmap_out)
    if args.overlay:
        base = image if image is not None else np.repeat(fg[..., None], 3, axis=2)
        draw_overlay(base, cats, args.overlay)
    print(args.out)


COMMANDS = {"synth": run_synth, "train": run_train, "eval": run_eval, "decode": run_decode, "curves": run_curves}


def _thread_limit(n):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    threads = args.threads
    if threads is None and os.environ.get(THREADS_ENV):
        threads = int(os.environ[THREADS_ENV])
    try:
        if threads is not None:
            if threads < 1:
                raise UsageError(f"--threads must be >= 1, got {threads}")
            with _thread_limit(threads):
                COMMANDS[args.command](args)
        else:
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"suturenet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except trainer.CheckpointVersionError as exc:
        print(f"suturenet {args.command}: checkpoint version mismatch: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, ValueError) as exc:
        print(f"suturenet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
