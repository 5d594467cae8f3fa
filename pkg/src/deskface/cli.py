"""Command-line interface.

Subcommands: train, eval, detect, anchors, rf, stats, synth,
dump-activations.  Report-producing commands write delimited output and
render a matching matplotlib figure next to it.  Exit codes: 0 on success,
1 on validation/format errors, 2 on IO errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import plots
from .checkpoint import load_checkpoint
from .config import load_config, spec_from_config, parse_config_text
from .data import (
    ellipse_to_box,
    load_image,
    parse_fddb,
    parse_wider,
    read_image_dims,
    save_image,
    serialize_wider,
    size_histogram,
    synth_generate,
    top_size_table,
)
from .errors import ConfigError, DeskfaceError
from .evaluate import average_precision, roc_continuous, roc_discrete
from .geometry import generate_anchors
from .network import build_network, forward_detect
from .receptive import erf_estimate, trf_table
from .tensor import Tensor
from .train import detect, detect_array, train_loop


def _write_or_print(text: str, path) -> None:
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    spec, cfg = load_config(Path(args.config).read_text())
    records = list(parse_wider(Path(args.data).read_text(),
                               image_root=Path(args.data).parent))
    model = build_network(spec, seed=cfg.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(out.suffix + ".log.csv")
    model, rows = train_loop(model, records, cfg, ckpt_path=out, log_path=log_path)
    plots.save_loss_curve(rows, log_path.with_suffix(".png"))
    print(f"trained {cfg.total_iters} iterations on {len(records)} images")
    print(f"checkpoint: {out}")
    print(f"log: {log_path}")
    return 0


def _load_eval_data(data_path: Path, metric: str):
    text = data_path.read_text()
    root = data_path.parent
    if metric == "ap":
        records = list(parse_wider(text, image_root=root))
        images = {r.source_id: r.image for r in records}
        gts = {r.source_id: r.boxes for r in records}
        return images, gts, None
    groups = list(parse_fddb(text))
    images = {}
    dims = {}
    for image_id, _ in groups:
        full = root / image_id
        if not full.exists():
            raise FileNotFoundError(f"image file not found: {full}")
        images[image_id] = load_image(full)
        dims[image_id] = images[image_id].shape[1:]
    ellipses = {image_id: ells for image_id, ells in groups}
    return images, ellipses, dims


def cmd_eval(args) -> int:
    model = load_checkpoint(args.ckpt)
    images, truth, dims = _load_eval_data(Path(args.data), args.metric)
    dets = []
    for image_id in sorted(images):
        dets.extend(detect_array(model, images[image_id], image_id,
                                 score_floor=args.score_floor,
                                 nms_iou=args.nms_iou))
    if args.metric == "ap":
        value, curve = average_precision(dets, truth, args.iou_thresh)
        n_gt = sum(len(v) for v in truth.values())
    elif args.metric == "roc-discrete":
        curve = roc_discrete(dets, truth, args.iou_thresh)
        value = curve.summary
        n_gt = sum(len(v) for v in truth.values())
    else:
        curve = roc_continuous(dets, truth, args.iou_thresh, grid_dims=dims)
        value = curve.summary
        n_gt = sum(len(v) for v in truth.values())

    csv = "x,y\n" + "".join(f"{x:.10g},{y:.10g}\n" for x, y in curve.points)
    Path(args.csv).write_text(csv)
    plots.save_curve(curve, Path(args.csv).with_suffix(".png"))
    print(f"{args.metric},{value:.10g},{len(images)},{n_gt},{len(dets)}")
    return 0


def cmd_detect(args) -> int:
    model = load_checkpoint(args.ckpt)
    found = detect(model, args.image, score_floor=args.score_floor,
                   nms_iou=args.nms_iou)
    lines = ["x1,y1,x2,y2,score"]
    lines += [
        f"{d.box.x1:.2f},{d.box.y1:.2f},{d.box.x2:.2f},{d.box.y2:.2f},{d.score:.4f}"
        for d in found
    ]
    _write_or_print("\n".join(lines) + "\n", args.csv)
    if args.plot:
        plots.save_detections(load_image(args.image), found, args.plot)
    return 0


def cmd_anchors(args) -> int:
    spec = spec_from_config(parse_config_text(Path(args.config).read_text()))
    problems = spec.validate()
    if problems:
        raise ConfigError("; ".join(problems))
    k = args.hierarchy
    if not 0 <= k < spec.n_hierarchies:
        raise ConfigError(
            f"hierarchy {k} out of range [0, {spec.n_hierarchies})")
    _, side = spec.tap_dims()[k]
    size = float(spec.input_size)
    aset = generate_anchors(k, (side, side), (size, size), spec.anchor_params)
    lines = ["k,x,y,ar,cx,cy,w,h,x1,y1,x2,y2"]
    for i in range(len(aset)):
        x, y, _slot = aset.cell_of(i)
        b = aset.box(i)
        lines.append(
            f"{k},{x},{y},{aset.ratio_of(i):.10g},{b.cx:.10g},{b.cy:.10g},"
            f"{b.w:.10g},{b.h:.10g},{b.x1:.10g},{b.y1:.10g},{b.x2:.10g},{b.y2:.10g}"
        )
    _write_or_print("\n".join(lines) + "\n", args.csv)
    return 0


def cmd_rf(args) -> int:
    spec = spec_from_config(parse_config_text(Path(args.config).read_text()))
    model = None
    if args.effective:
        if not args.ckpt:
            raise ConfigError("--effective needs --ckpt for the model weights")
        model = load_checkpoint(args.ckpt)
    rows = trf_table(spec)
    header = "layer,trf,jump" + (",erf" if args.effective else "")
    lines = [header]
    for name, state in rows:
        line = f"{name},{float(state.rf):.10g},{float(state.jump):.10g}"
        if args.effective:
            radius = erf_estimate(model, name, mass=args.mass,
                                  trials=args.trials, seed=args.seed)
            line += f",{radius:.10g}"
        lines.append(line)
    _write_or_print("\n".join(lines) + "\n", args.csv)
    return 0


def _histogram_csv(hist) -> str:
    lines = ["bucket,count,fraction"]
    for label, count, frac in zip(hist.labels, hist.counts, hist.fractions):
        lines.append(f"{label},{count},{frac:.10g}")
    return "\n".join(lines) + "\n"


def _table_csv(rows) -> str:
    lines = ["bucket,height,width,percent"]
    for label, (h, w), pct in rows:
        lines.append(f"{label},{h},{w},{pct:.10g}")
    return "\n".join(lines) + "\n"


def cmd_stats(args) -> int:
    path = Path(args.annotations)
    text = path.read_text()
    if args.format == "wider":
        records = [(rec.source_id, rec.boxes) for rec in parse_wider(text)]
    else:
        records = [
            (image_id, [ellipse_to_box(e) for e in ells])
            for image_id, ells in parse_fddb(text)
        ]
    hist = size_histogram([b for _, boxes in records for b in boxes])

    # the dimension table needs image sizes; probe headers when present
    with_dims = []
    missing = 0
    for image_id, boxes in records:
        full = path.parent / image_id
        if full.exists():
            with_dims.append((boxes, read_image_dims(full)))
        else:
            missing += 1
    table_rows = top_size_table(with_dims) if with_dims else []
    if missing:
        print(f"note: {missing} image files not found; "
              f"dimension table covers the rest", file=sys.stderr)

    hist_csv = _histogram_csv(hist)
    table_csv = _table_csv(table_rows)
    if args.csv_prefix:
        prefix = Path(args.csv_prefix)
        hist_path = prefix.with_name(prefix.name + ".hist.csv")
        table_path = prefix.with_name(prefix.name + ".table.csv")
        hist_path.write_text(hist_csv)
        table_path.write_text(table_csv)
        plots.save_size_histogram(hist, prefix.with_name(prefix.name + ".hist.png"))
        print(f"wrote {hist_path} and {table_path}")
    else:
        sys.stdout.write(hist_csv)
        sys.stdout.write("\n")
        sys.stdout.write(table_csv)
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    faces = tuple(int(v) for v in args.faces.split(","))
    sizes = tuple(float(v) for v in args.sizes.split(","))
    records = []
    for rec in synth_generate(args.count, image_size=args.image_size,
                              faces_range=faces, size_range=sizes,
                              seed=args.seed):
        rel = f"images/{rec.source_id}.png"
        save_image(out / rel, rec.image)
        rec.source_id = rel
        records.append(rec)
    (out / "annotations.txt").write_text(serialize_wider(records))
    print(f"wrote {len(records)} images under {out}")
    return 0


def cmd_dump_activations(args) -> int:
    model = load_checkpoint(args.ckpt)
    image = load_image(args.image)
    if image.shape[0] != model.spec.in_channels:
        image = image.mean(axis=0, keepdims=True)
    from .data import AnnotatedImage, resize_with_boxes

    resized = resize_with_boxes(AnnotatedImage(image, [], "probe"),
                                model.spec.input_size)
    collect: dict = {}
    model.training = False
    forward_detect(model, Tensor(resized.image[None]), collect=collect)
    lines = ["layer,bin_lo,bin_hi,count"]
    layer_hists = {}
    for name, act in collect.items():
        lo, hi = float(act.min()), float(act.max())
        if hi <= lo:
            hi = lo + 1e-9
        counts, edges = np.histogram(act, bins=args.bins, range=(lo, hi))
        layer_hists[name] = (edges, counts)
        for i, c in enumerate(counts):
            lines.append(f"{name},{edges[i]:.6g},{edges[i + 1]:.6g},{int(c)}")
    _write_or_print("\n".join(lines) + "\n", args.csv)
    if args.plot:
        plots.save_activation_histograms(layer_hists, args.plot)
    return 0


# ---------------------------------------------------------------------------
# argument wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deskface",
        description="desk-scale single-shot face detection pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a detector from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="box-annotation file; images resolve relative to it")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default: <out>.log.csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against annotations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--metric", required=True,
                   choices=["ap", "roc-discrete", "roc-continuous"])
    p.add_argument("--csv", required=True, help="curve output path")
    p.add_argument("--iou-thresh", type=float, default=0.5)
    p.add_argument("--score-floor", type=float, default=0.01)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="run detection on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--score-floor", type=float, default=0.01)
    p.add_argument("--nms-iou", type=float, default=0.45)
    p.add_argument("--csv", help="write detections here instead of stdout")
    p.add_argument("--plot", help="render the image with boxes to this file")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("anchors", help="dump one hierarchy's default boxes")
    p.add_argument("--config", required=True)
    p.add_argument("--hierarchy", type=int, required=True)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_anchors)

    p = sub.add_parser("rf", help="receptive fields per layer")
    p.add_argument("--config", required=True)
    p.add_argument("--effective", action="store_true",
                   help="add a measured-field column (needs --ckpt)")
    p.add_argument("--ckpt")
    p.add_argument("--mass", type=float, default=0.95)
    p.add_argument("--trials", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_rf)

    p = sub.add_parser("stats", help="corpus face-size statistics")
    p.add_argument("--annotations", required=True)
    p.add_argument("--format", required=True, choices=["wider", "fddb"])
    p.add_argument("--csv-prefix", help="write <prefix>.hist.csv/.table.csv/.hist.png")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic annotated corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--faces", default="0,3", help="min,max faces per image")
    p.add_argument("--sizes", default="8,48", help="min,max face size in px")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("dump-activations", help="per-layer value histograms")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--csv")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_dump_activations)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DeskfaceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
