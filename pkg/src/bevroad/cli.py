"""
Command-line entry point.

    bevroad synth      --out DIR [--n 8]
    bevroad preprocess --data ROOT --out DIR
    bevroad train      --data PREP --out DIR [--variant A]
    bevroad crossval   --data PREP --out DIR [--variant all] [--k 10]
    bevroad gridsearch --data PREP --out DIR [--variant A]
    bevroad predict    --checkpoint FILE --data PREP --out DIR
    bevroad evaluate   --pred DIR --gt PREP [--group category|overall]

Every subcommand accepts ``--config FILE`` and repeated ``--set key=value``
overrides. Exit codes: 0 ok, 2 data error, 3 training divergence,
4 configuration or compatibility error.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config, load_config
from .errors import (
    ConfigError,
    DatasetLayoutError,
    DegenerateInputError,
    DivergenceError,
    ImageFormatError,
    MalformedFileError,
    ShapeError,
)
from .eval_metrics import aggregate, format_table, pr_curve
from .kitti_io import discover_dataset, encode_confidence_png, encode_overlay_png, read_png, write_png
from .model_zoo import ModelVariant, predict as model_predict, prepare_inputs
from .pipeline import GT_FILE, load_preprocessed, preprocess_scene, write_scene_outputs
from .synth_data import SynthParams, write_kitti_layout
from .train_engine import Checkpoint, cross_validate, grid_search, train

log = logging.getLogger("bevroad")

EXIT_OK, EXIT_DATA, EXIT_DIVERGED, EXIT_CONFIG = 0, 2, 3, 4


class CompatError(Exception):
    """Inputs do not fit the checkpoint or each other (exit 4)."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _overrides(args) -> dict[str, str]:
    pairs = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, _, v = item.partition("=")
        pairs[k.strip()] = v.strip()
    if getattr(args, "profile", None):
        pairs["model.profile"] = args.profile
    if getattr(args, "seed", None) is not None:
        pairs["train.seed"] = str(args.seed)
    return pairs


def _prepare_out(out: Path, cfg: Config) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.txt").write_text(f"# bevroad {__version__}\n" + cfg.to_text())
    return out


def _variants(text: str) -> list[ModelVariant]:
    if text.strip().lower() == "all":
        return list(ModelVariant)
    try:
        return [ModelVariant.parse(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _mark(flag: bool) -> str:
    return "yes" if flag else "no"


def crossval_table(results) -> str:
    """Comparison table: one row per model, mean BinaryIoU over folds."""
    cols = ["Model", "Camera", "LiDAR", "Combined input", "Skip connections", "BinaryIoU"]
    rows = [cols]
    for r in results:
        v = r.variant
        rows.append(
            [
                f"Model {v.value}",
                _mark(v.uses_camera),
                _mark(v.uses_lidar),
                _mark(v.combined_input),
                _mark(v.skip_connections),
                f"{r.mean_biou:.4f}",
            ]
        )
    widths = [max(len(row[i]) for row in rows) for i in range(len(cols))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def crossval_folds(results) -> str:
    lines = ["model\tfold\tsize\tbinary_iou"]
    for r in results:
        for i, (b, n) in enumerate(zip(r.fold_biou, r.fold_sizes), 1):
            lines.append(f"{r.variant.value}\t{i}\t{n}\t{b:.6f}")
        lines.append(f"{r.variant.value}\tmean\t{sum(r.fold_sizes)}\t{r.mean_biou:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg: Config) -> int:
    out = _prepare_out(Path(args.out), cfg)
    ids = write_kitti_layout(out, args.n, SynthParams(seed=cfg["train.seed"]), cfg.raster())
    log.info("wrote %d synthetic scenes to %s", len(ids), out)
    return EXIT_OK


def _preprocess_one(task):
    ref, raster, plane, out = task
    try:
        write_scene_outputs(out / ref.id, preprocess_scene(ref, raster, plane))
        return ref.id, None
    except (MalformedFileError, ImageFormatError, ShapeError, OSError) as exc:
        return ref.id, str(exc)


def cmd_preprocess(args, cfg: Config) -> int:
    refs, skipped = discover_dataset(args.data)
    out = _prepare_out(Path(args.out), cfg)
    tasks = [(ref, cfg.raster(), cfg.plane(), out) for ref in refs]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_preprocess_one, tasks))
    else:
        results = [_preprocess_one(t) for t in tasks]
    failed = [(sid, err) for sid, err in results if err]
    for sid, err in failed:
        log.error("scene %s failed: %s", sid, err)
    report = [f"{sid}\t{why}" for sid, why in skipped.skipped + failed]
    (out / "skipped.txt").write_text("".join(line + "\n" for line in report))
    log.info("preprocessed %d scene(s), %d skipped or failed", len(results) - len(failed), len(report))
    return EXIT_OK


def _load_scenes(path, cfg: Config):
    scenes = load_preprocessed(path)
    prof = cfg.profile()
    if scenes[0].shape != (prof.input_h, prof.input_w):
        raise CompatError(
            f"scenes are {scenes[0].shape[0]}x{scenes[0].shape[1]} but profile "
            f"{cfg['model.profile']!r} expects {prof.input_h}x{prof.input_w}; "
            "adjust raster.resolution or model.profile"
        )
    return scenes


def cmd_train(args, cfg: Config) -> int:
    variant = _variants(args.variant)
    if len(variant) != 1:
        raise ConfigError("train takes exactly one variant")
    scenes = _load_scenes(args.data, cfg)
    out = _prepare_out(Path(args.out), cfg)
    ckpt, history = train(variant[0], cfg.profile(), scenes, cfg.hyperparams())
    ckpt.save(out / "model.ckpt")
    (out / "history.tsv").write_text(history.to_text())
    log.info("best epoch %d, validation BinaryIoU %.4f", ckpt.epoch, ckpt.val_biou)
    return EXIT_OK


def cmd_crossval(args, cfg: Config) -> int:
    variants = _variants(args.variant)
    scenes = _load_scenes(args.data, cfg)
    if args.k > len(scenes):
        raise ConfigError(f"k={args.k} exceeds the {len(scenes)} available scenes")
    out = _prepare_out(Path(args.out), cfg)
    results = []
    for v in variants:
        log.info("cross-validating model %s (k=%d)", v.value, args.k)
        results.append(cross_validate(v, cfg.profile(), scenes, cfg.hyperparams(), args.k, args.jobs))
    table = crossval_table(results)
    (out / "crossval_report.txt").write_text(table)
    (out / "crossval_folds.tsv").write_text(crossval_folds(results))
    sys.stdout.write(table)
    return EXIT_OK


def cmd_gridsearch(args, cfg: Config) -> int:
    variant = _variants(args.variant)
    if len(variant) != 1:
        raise ConfigError("gridsearch takes exactly one variant")
    scenes = _load_scenes(args.data, cfg)
    out = _prepare_out(Path(args.out), cfg)
    results = grid_search(cfg.grid(), variant[0], cfg.profile(), scenes, cfg.hyperparams(), args.jobs)
    lines = ["rank\tconfig\toptimizer\tlr\tloss\tdropout\tval_split\taug_rate\tval_biou\tval_loss"]
    for rank, r in enumerate(results, 1):
        hp = r.hp
        lines.append(
            f"{rank}\t{r.index}\t{hp.optimizer}\t{hp.learning_rate:g}\t{hp.loss}\t{hp.dropout_rate:g}"
            f"\t{hp.val_split:g}\t{hp.aug_rate:g}\t{r.val_biou:.6f}\t{r.val_loss:.6f}"
        )
    text = "\n".join(lines) + "\n"
    (out / "gridsearch_report.tsv").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_predict(args, cfg: Config) -> int:
    try:
        ckpt = Checkpoint.load(args.checkpoint)
    except (OSError, MalformedFileError, KeyError, ValueError) as exc:
        raise CompatError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    scenes = load_preprocessed(args.data, require_gt=False)
    prof = ckpt.profile
    bad = [s.id for s in scenes if s.shape != (prof.input_h, prof.input_w)]
    if bad:
        raise CompatError(
            f"checkpoint expects {prof.input_h}x{prof.input_w} inputs; mismatching scenes: {', '.join(bad[:5])}"
        )
    out = _prepare_out(Path(args.out), cfg)
    model = ckpt.build()
    seconds = []
    for s in scenes:
        inputs = prepare_inputs(ckpt.variant, s.camera_bev.data[None], s.lidar_bev.data[None])
        start = time.perf_counter()
        conf = model_predict(model, inputs)[0, :, :, 0]
        seconds.append(time.perf_counter() - start)
        write_png(out / f"{s.id}.png", encode_confidence_png(conf))
    mean = float(np.mean(seconds))
    (out / "timing.txt").write_text(f"images={len(seconds)}\nmean_seconds_per_image={mean:.6f}\n")
    log.info("predicted %d scene(s), %.6f s/image", len(seconds), mean)
    return EXIT_OK


def cmd_evaluate(args, cfg: Config) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    preds = {p.stem: p for p in sorted(pred_dir.glob("*.png"))}
    gts = {d.name: d / GT_FILE for d in sorted(gt_dir.iterdir()) if (d / GT_FILE).is_file()} if gt_dir.is_dir() else {}
    missing_pred = sorted(set(gts) - set(preds))
    missing_gt = sorted(set(preds) - set(gts))
    if missing_pred or missing_gt or not gts:
        raise CompatError(
            "scene ids differ: "
            f"no prediction for [{', '.join(missing_pred)}]; no ground truth for [{', '.join(missing_gt)}]"
        )
    scenes = {s.id: s for s in load_preprocessed(gt_dir)}
    out = Path(args.out) if args.out else pred_dir / "eval"
    _prepare_out(out, cfg)
    (out / "overlays").mkdir(exist_ok=True)
    curves, cats = {}, {}
    for sid in sorted(gts):
        conf_img = read_png(preds[sid])
        if conf_img.ndim == 3:
            conf_img = conf_img[:, :, 0]
        conf = conf_img.astype(np.float64) / 255.0
        gt = scenes[sid].gt
        if conf.shape != gt.shape:
            raise CompatError(f"{sid}: prediction {conf.shape} vs ground truth {gt.shape}")
        curves[sid] = pr_curve(conf, gt)
        cats[sid] = scenes[sid].category
        write_png(out / "overlays" / f"{sid}.png", encode_overlay_png(conf, gt))
    reports = aggregate(curves, cats, args.group)
    for name, rep in reports.items():
        (out / f"report_{name}.txt").write_text(rep.to_keyvalue())
    table = format_table(reports)
    (out / "table.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevroad", description="BEV camera+LiDAR road segmentation")
    parser.add_argument("--version", action="version", version=f"bevroad {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--profile", choices=["desk", "full"], help="shortcut for model.profile")
        p.add_argument("--seed", type=int, help="shortcut for train.seed")
        p.add_argument("--jobs", type=int, default=1, help="worker processes (1 = reproducible reference)")
        return p

    p = common(sub.add_parser("synth", help="write a synthetic KITTI-Road style dataset"))
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("preprocess", help="BEV rasters and warps for every scene"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = common(sub.add_parser("train", help="train one model variant"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="A")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("crossval", help="k-fold cross-validation comparison"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="all", help="'all' or comma-separated letters")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_crossval)

    p = common(sub.add_parser("gridsearch", help="hyper-parameter grid search"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="A")
    p.set_defaults(func=cmd_gridsearch)

    p = common(sub.add_parser("predict", help="confidence maps from a checkpoint"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = common(sub.add_parser("evaluate", help="pixel-wise metrics and overlays"))
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--group", choices=["category", "overall"], default="category")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        return args.func(args, cfg)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except CompatError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except (DatasetLayoutError, MalformedFileError, ImageFormatError, DegenerateInputError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
