"""``cmsnet`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(missing or unreadable input), 3 numeric failure (non-finite values, or a
failed selftest oracle).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import bench as B
from . import dataset as D
from . import impairments as I
from . import optimizer as O
from . import plotting as P
from . import runtime as R
from . import tensor as T
from .errors import ConfigError, DataError, NumericError
from .graph import (ARRANGEMENTS, ArrangementConfig, Graph, assign_weights, build_graph, canonical_name,
                    count_params, describe, infer_shapes, load_config, load_weights, save_config, save_weights)
from .metrics import ConfusionMatrix, write_report
from .trainer import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_SEED = 42


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def parse_dims(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("dimensions must be positive")
    return h, w


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("values must be positive")
    return vals


# --- shared helpers -------------------------------------------------------

def _out_file(args, name: str) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    if path.exists() and not args.force:
        raise UsageError(f"{path} already exists; pass --force to overwrite")
    return path


def _arrangement_config(args) -> ArrangementConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        if args.input:
            cfg.input_h, cfg.input_w = args.input
        return cfg
    if not args.arrangement:
        raise UsageError("pass --arrangement NAME or --config PATH")
    h, w = args.input or (483, 769)
    return ArrangementConfig.from_name(canonical_name(args.arrangement), args.classes, h, w)


def load_graph(config: ArrangementConfig, weights_path=None, seed: int = 0) -> Graph:
    """Build ``config`` and attach weights from a file, accepting plain or optimized weight sets."""
    graph = build_graph(config, seed)
    if weights_path is None:
        return graph
    weights = load_weights(weights_path)
    if set(weights) == set(graph.weights):
        return assign_weights(graph, weights)
    optimized, _ = O.optimize(graph)
    if set(weights) == set(optimized.weights):
        return assign_weights(optimized, weights)
    raise ConfigError(f"{weights_path}: weights match neither the {config.name} graph nor its optimized form")


def _model(args) -> Graph:
    cfg = _arrangement_config(args)
    if not args.weights:
        raise UsageError("this command needs --weights (a trained weights file)")
    return load_graph(cfg, args.weights)


def _synthetic(n: int, dims, classes: int, seed: int):
    return [(f"syn{seed + i:05d}", *D.generate_synthetic_scene(seed + i, dims, classes)) for i in range(n)]


def _manifest_samples(path, split: str | None, dims=None, conditions=None):
    base = Path(path).parent
    rows = D.read_manifest(path)
    out = []
    for r in rows:
        if split and r.split != split:
            continue
        if conditions and r.condition not in conditions:
            continue
        img = D.read_image(base / r.image_path)
        mask = D.read_mask(base / r.mask_path)
        if img.shape[:2] != mask.shape:
            raise DataError(f"{r.image_path}: image {img.shape[:2]} and mask {mask.shape} sizes differ")
        if dims is not None and mask.shape != tuple(dims):
            raise DataError(f"{r.image_path}: size {mask.shape[0]}x{mask.shape[1]} does not match the network input "
                            f"{dims[0]}x{dims[1]}")
        out.append((r.sample_id, img, mask))
    if not out:
        raise DataError(f"{path}: no samples selected")
    return out


def _samples(args, dims, classes, conditions=None):
    if getattr(args, "manifest", None):
        return _manifest_samples(args.manifest, args.split, dims, conditions)
    if getattr(args, "synthetic", None):
        return _synthetic(args.synthetic, dims, classes, args.seed)
    raise UsageError("pass --manifest CSV or --synthetic N")


def _print_config(args) -> None:
    print(f"# cmsnet {args.command}")
    for k, v in sorted(vars(args).items()):
        if k not in ("command", "func"):
            print(f"#   {k} = {v}")


# --- subcommands ----------------------------------------------------------

def cmd_describe(args):
    cfg = _arrangement_config(args)
    graph = build_graph(cfg)
    rows = describe(graph)
    width = max(len(r["node"]) for r in rows)
    print(f"{'node':<{width}}  {'op':<18} {'h':>5} {'w':>5} {'c':>5} {'params':>9}")
    for r in rows:
        print(f"{r['node']:<{width}}  {r['op']:<18} {r['h']:>5} {r['w']:>5} {r['c']:>5} {r['params']:>9}")
    shapes = infer_shapes(graph)
    _, fh, fw, fc = shapes[graph.meta["features"]]
    print(f"{cfg.name}: output stride {cfg.output_stride}, {cfg.pyramid}, shortcut {'yes' if cfg.shortcut else 'no'}")
    print(f"final feature {fh}x{fw}x{fc}")
    print(f"parameters {count_params(graph)}")
    if args.out:
        path = _out_file(args, f"describe_{cfg.name}.csv")
        with open(path, "w", newline="") as fh_:
            w = csv.DictWriter(fh_, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    return EXIT_OK


def cmd_convert(args):
    src = Path(args.annotations)
    files = sorted(src.glob("*.json"))
    if not files:
        raise DataError(f"{src}: no .json annotation files")
    entries = []
    for f in files:
        ann = D.load_annotation(f)
        mask_name = f"{f.stem}.{args.format}"
        D.write_mask(_out_file(args, mask_name), D.rasterize(ann))
        image = next((p for p in sorted(f.parent.glob(f.stem + ".*")) if p.suffix.lower() in (".png", ".jpg", ".jpeg")), None)
        image_rel = os.path.relpath(image.resolve(), Path(args.out).resolve()) if image else ""
        entries.append(D.ManifestEntry(f.stem, image_rel, mask_name, args.condition))
    split = D.split_dataset(entries, seed=args.seed)
    for e in entries:
        e.split = split.split_of(e.sample_id)
    D.write_manifest(_out_file(args, "manifest.csv"), entries)
    print(f"converted {len(entries)} annotations (train {len(split.train)}, val {len(split.val)}, test {len(split.test)})")
    return EXIT_OK


def cmd_train(args):
    cfg = _arrangement_config(args)
    graph = build_graph(cfg, args.seed)
    data = _samples(args, (cfg.input_h, cfg.input_w), cfg.num_classes)
    paths = {k: _out_file(args, n) for k, n in
             [("weights", "weights.cmsw"), ("config", "config.json"), ("log", "train_log.csv"), ("fig", "training.png")]}
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, base_lr=args.lr, seed=args.seed,
                       augment=args.augment, max_iter=args.iters)
    trained, log = train(graph, [(img, m) for _, img, m in data], tcfg, augment_fn=I.augment,
                         callback=lambda r: print(f"epoch {r['epoch']} iter {r['iter']} loss {r['loss']:.5f} "
                                                  f"miou {r['miou']:.4f}"))
    save_weights(trained.weights, paths["weights"])
    save_config(cfg, paths["config"])
    log.write_csv(paths["log"])
    P.plot_training(log.rows, paths["fig"])
    return EXIT_OK


def _predict_image(graph: Graph, image: np.ndarray) -> np.ndarray:
    h, w, _ = graph.input_shape
    src_h, src_w = image.shape[:2]
    x = R.preprocess(image)
    if (src_h, src_w) != (h, w):
        x = T.bilinear_resize(x, h, w)
    mask = R.predict(graph, x)[0]
    if (src_h, src_w) != (h, w):
        rows = np.minimum(((np.arange(src_h) + 0.5) * h / src_h).astype(int), h - 1)
        cols = np.minimum(((np.arange(src_w) + 0.5) * w / src_w).astype(int), w - 1)
        mask = mask[np.ix_(rows, cols)]
    return mask.astype(np.uint8)


def cmd_infer(args):
    graph = _model(args)
    table = D.DEFAULT_CLASSES.subset(graph_classes(graph))
    for path in args.image:
        image = D.read_image(path)
        mask = _predict_image(graph, image)
        stem = Path(path).stem
        D.write_mask(_out_file(args, f"{stem}_mask.png"), mask)
        if args.overlay:
            D.write_image(_out_file(args, f"{stem}_overlay.png"), D.overlay(image, mask, table))
        ids, counts = np.unique(mask, return_counts=True)
        print(f"{path}: " + ", ".join(f"{table.names[i]} {c}" for i, c in zip(ids, counts)))
    return EXIT_OK


def graph_classes(graph: Graph) -> int:
    return int(graph.meta["config"]["num_classes"])


def _mask_files(directory) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d}: not a directory")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in (".png", ".pgm")}


def cmd_eval(args):
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise UsageError("--pred and --gt must be given together")
        gt, pred = _mask_files(args.gt), _mask_files(args.pred)
        if not gt:
            raise DataError(f"{args.gt}: no mask files")
        cm = ConfusionMatrix(args.classes)
        for stem, gpath in gt.items():
            if stem not in pred:
                raise DataError(f"{args.pred}: missing prediction for {gpath.name}")
            cm.accumulate(D.read_mask(gpath), D.read_mask(pred[stem]), args.ignore_id)
        names = D.DEFAULT_CLASSES.subset(args.classes).names
    else:
        graph = _model(args)
        cfg = graph.meta["config"]
        data = _samples(args, (cfg["input_h"], cfg["input_w"]), cfg["num_classes"])
        cm = evaluate(graph, [(img, m) for _, img, m in data], cfg["num_classes"], args.ignore_id, args.batch)
        names = D.DEFAULT_CLASSES.subset(cfg["num_classes"]).names
    report, fig = _out_file(args, "metrics.csv"), _out_file(args, "class_metrics.png")
    write_report(cm, report, names)
    P.plot_class_metrics(cm.ious(), [cm.class_pixel_accuracy(i) for i in range(cm.num_classes)], names, fig)
    s = cm.summary()
    print(f"p_acc {s['p_acc']:.4f} mcp_acc {s['mcp_acc']:.4f} miou {s['miou']:.4f} fwiou {s['fwiou']:.4f}")
    return EXIT_OK


def cmd_sweep(args):
    graph = _model(args)
    cfg = graph.meta["config"]
    dims, classes = (cfg["input_h"], cfg["input_w"]), cfg["num_classes"]
    good = _samples(args, dims, classes, conditions={"daytime"} if args.manifest else None)
    curves = {}
    for cond in args.conditions:
        if cond == "noise" and not args.mix_noise:
            levels = tuple(round(0.025 * k, 10) for k in range(11))
            spec = I.SweepSpec(good, fractions=levels, num_classes=classes, mode="severity",
                               impairment=I.add_gaussian_noise, per_image=args.per_image, seed=args.seed)
        else:
            bad = _impaired_set(args, good, cond, dims, classes)
            spec = I.SweepSpec(good, bad, num_classes=classes, per_image=args.per_image, seed=args.seed)
        curve = I.condition_sweep(graph, spec, args.batch)
        I.write_sweep_csv(curve, _out_file(args, f"sweep_{cond}.csv"))
        curves[cond] = curve
        print(f"{cond}: miou {curve[0][1]:.4f} -> {curve[-1][1]:.4f}, degradation {I.degradation(curve):.2f} points")
    P.plot_sweep(curves, _out_file(args, "sweep.png"), xlabel="impaired fraction / noise severity")
    return EXIT_OK


def _impaired_set(args, good, cond, dims, classes):
    if cond in I.IMPAIRMENTS:
        fn = I.IMPAIRMENTS[cond]
        level = args.level if args.level is not None else (0.25 if cond == "noise" else 0.8)
        return [(f"{sid}-{cond}", fn(img, level, args.seed + k), m) for k, (sid, img, m) in enumerate(good)]
    if not args.manifest:
        raise UsageError(f"condition {cond!r} needs real samples from --manifest")
    return _manifest_samples(args.manifest, args.split, dims, conditions={cond})


def cmd_optimize(args):
    cfg = _arrangement_config(args)
    graph = _model(args)
    optimized, reports = O.optimize(graph)
    save_weights(optimized.weights, _out_file(args, "optimized.cmsw"))
    save_config(cfg, _out_file(args, "config.json"))
    O.write_reports(reports, _out_file(args, "passes.csv"))
    for r in reports:
        print(f"{r.name}: nodes {r.nodes_before} -> {r.nodes_after}, weight bytes {r.weight_bytes_before} -> "
              f"{r.weight_bytes_after}")
    return EXIT_OK


def cmd_bench(args):
    if args.config:
        cfg = _arrangement_config(args)
        targets = [(cfg.name, lambda: load_graph(cfg, args.weights))]
    else:
        names = [canonical_name(a) for a in (args.arrangement or "CM3").split(",")]
        h, w = args.input or (483, 769)
        targets = [(n, lambda n=n: build_graph(ArrangementConfig.from_name(n, args.classes, h, w), args.seed))
                   for n in names]
    batches = args.batch if isinstance(args.batch, list) else [args.batch]
    csv_path, fig_path = _out_file(args, "bench.csv"), _out_file(args, "bench.png")
    rows, samples = [], {}
    for name, make in targets:
        graph = make()
        if args.optimized:
            graph, _ = O.optimize(graph)
        for batch in batches:
            stats = B.time_inference(graph, batch=batch, iterations=args.iters, warmup=args.warmup, seed=args.seed)
            rows.append(B.bench_row(name, stats))
            samples[f"{name}/b{batch}"] = stats.fps_samples
            print(f"{name} batch {batch}: {stats.per_image_fps:.2f} FPS, SD {stats.sd_pct:.2f}% "
                  f"over {stats.iterations} iterations")
    B.write_bench_csv(rows, csv_path)
    P.plot_bench(samples, fig_path)
    return EXIT_OK


def cmd_selftest(args):
    from .selftest import run_selftest

    results = run_selftest(args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail} ({r.seconds:.2f} s)")
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} oracles passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


# --- parser ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="arrangement config JSON")
    common.add_argument("--weights", help="weights file (.cmsw)")
    common.add_argument("--arrangement", help=f"one of {', '.join(ARRANGEMENTS)}")
    common.add_argument("--input", type=parse_dims, help="network input size HxW")
    common.add_argument("--classes", type=int, default=10, help="number of classes (default 10)")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED, help=f"random seed (default {DEFAULT_SEED})")
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing output files")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--manifest", help="manifest CSV (sample_id,image_path,mask_path,condition,split)")
    data.add_argument("--split", default=None, help="manifest split to use (train/val/test)")
    data.add_argument("--synthetic", type=int, help="use N generated synthetic scenes instead of a manifest")

    parser = _Parser(prog="cmsnet", description="Configurable modular segmentation networks on numpy.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("describe", parents=[common], help="print the layer table of an arrangement")
    p.set_defaults(func=cmd_describe)

    p = sub.add_parser("convert", parents=[common], help="rasterize polygon annotations into masks")
    p.add_argument("--annotations", required=True, help="directory of LabelMe-style .json files")
    p.add_argument("--condition", default="daytime", choices=D.CONDITIONS)
    p.add_argument("--format", default="png", choices=("png", "pgm"))
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", parents=[common, data], help="train an arrangement")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--iters", type=int, default=None, help="stop after this many iterations")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--lr", type=float, default=0.007)
    p.add_argument("--augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="segment images")
    p.add_argument("--image", nargs="+", required=True)
    p.add_argument("--overlay", action="store_true", help="also write a color overlay")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common, data], help="compute the metric report")
    p.add_argument("--pred", help="directory of predicted masks")
    p.add_argument("--gt", help="directory of ground-truth masks")
    p.add_argument("--ignore-id", type=int, default=None)
    p.add_argument("--batch", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", parents=[common, data], help="condition sweeps")
    p.add_argument("--conditions", nargs="+", default=["fog", "noise"],
                   help="fog, noise (generated) or manifest conditions such as night")
    p.add_argument("--level", type=float, default=None, help="impairment level for generated mix sets")
    p.add_argument("--mix-noise", action="store_true", help="sweep noise by mix fraction instead of severity")
    p.add_argument("--per-image", action="store_true", help="average per-image mIoU instead of a global matrix")
    p.add_argument("--batch", type=int, default=4)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("optimize", parents=[common], help="fold, fuse and prune the inference graph")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("bench", parents=[common], help="latency benchmark")
    p.add_argument("--iters", type=int, default=B.DEFAULT_ITERATIONS)
    p.add_argument("--warmup", type=int, default=B.DEFAULT_WARMUP)
    p.add_argument("--batch", type=_int_list, default=[1], help="batch sizes, e.g. 1,4")
    p.add_argument("--optimized", action="store_true", help="benchmark the optimized graph")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("selftest", parents=[common], help="run the built-in oracle checks")
    p.set_defaults(func=cmd_selftest)
    return parser


WRITES = {"convert", "train", "infer", "eval", "sweep", "optimize", "bench"}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        if args.command in WRITES and not args.out:
            raise UsageError(f"{args.command} writes files; pass --out DIR")
        if args.classes < 2:
            raise UsageError("--classes must be at least 2")
        _print_config(args)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        sys.stdout.flush()
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        sys.stdout.flush()
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        sys.stdout.flush()
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
