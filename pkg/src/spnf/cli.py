"""Command-line front end: ``spnf {synth,train,render,eval}``.

Exit codes: 0 success, 1 invalid arguments or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io_utils
from .cameras import Camera
from .distill import DistillConfig
from .field import EncodingConfig, FieldArch, load_checkpoint
from .scene_io import PRESETS, PriorDistortion, SceneFormatError, load_scene, make_synthetic_scene, select_views, write_scene
from .training import DEPTH_LOSSES, LossWeights, TrainConfig, TrainingDiverged, train

log = logging.getLogger("spnf")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# (flag, dest, type, default, provenance, help)
TRAIN_FLAGS = [
    ("--iters", "iterations", int, 3000, "desk-scale", "training iterations"),
    ("--batch-rays", "batch_rays", int, 1024, "desk-scale", "reconstruction rays per iteration"),
    ("--samples", "n_samples", int, 64, "desk-scale", "stratified samples per ray"),
    ("--lr-start", "lr_start", float, 2e-3, "paper", "initial learning rate"),
    ("--lr-end", "lr_end", float, 2e-5, "paper", "final learning rate"),
    ("--lambda", "lambda_rank", float, 0.2, "paper", "weight of the depth-ranking term"),
    ("--gamma", "gamma_conti", float, 0.02, "paper", "weight of the spatial-continuity term"),
    ("--margin-rank", "margin_rank", float, 1e-4, "paper", "ranking hinge margin"),
    ("--margin-conti", "margin_conti", float, 1e-4, "paper", "continuity hinge margin"),
    ("--patch-size", "patch_size", int, 32, "desk-scale", "edge of a distillation patch in pixels"),
    ("--pairs-per-patch", "pairs_per_patch", int, 128, "desk-scale", "ranking pairs drawn per patch"),
    ("--patches-per-iter", "patches_per_iter", int, 4, "desk-scale", "distillation patches per iteration"),
    ("--knn-k", "knn_k", int, 4, "desk-scale", "neighbors per continuity anchor"),
    ("--knn-region", "knn_region", int, 6, "paper", "KNN window edge in pixels"),
    ("--knn-metric", "knn_metric", str, "rank", "desk-scale", "KNN gap measure: rank or value"),
    ("--width", "width", int, 64, "desk-scale", "hidden width of the field MLP"),
    ("--levels-pos", "levels_pos", int, 10, "desk-scale", "positional encoding levels for x"),
    ("--levels-dir", "levels_dir", int, 4, "desk-scale", "positional encoding levels for d"),
    ("--chunk-rays", "chunk_rays", int, 256, "desk-scale", "rays per forward/backward chunk"),
    ("--checkpoint-every", "checkpoint_every", int, 0, "desk-scale", "also checkpoint every N iterations (0: end only)"),
]


def _add_train_flags(p):
    for flag, dest, typ, default, prov, text in TRAIN_FLAGS:
        p.add_argument(flag, dest=dest, type=typ, default=None, help=f"{text} (default: {default}, {prov})")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="spnf", description="Few-shot radiance fields with depth-ranking distillation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic scene directory")
    p.add_argument("--preset", choices=PRESETS, default="two-planes")
    p.add_argument("--views", type=int, default=9)
    p.add_argument("--res", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prior-exponent", type=float, default=1.5, help="monotone warp d -> d^e of the priors (default: 1.5, desk-scale)")
    p.add_argument("--prior-noise", type=float, default=0.02, help="uniform prior noise amplitude (default: 0.02, desk-scale)")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", help="train a field on a scene")
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--views", dest="k_train", type=int, default=None, help="training views (default: 3, paper)")
    p.add_argument("--depth-loss", choices=DEPTH_LOSSES, default=None,
                   help="ranking: rank+continuity terms; scaling: affine depth regression baseline; none (default: ranking)")
    p.add_argument("--seed", type=int, default=None, help="(default: 0)")
    p.add_argument("--config", type=Path, help="TOML file with a [train] table; flags override it")
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    p.add_argument("--log", type=Path, help="JSON-lines log path (default: log.jsonl beside the checkpoint)")
    p.add_argument("--threads", type=int, default=None, help="renderer threads (default: 1)")
    p.add_argument("--deterministic", action="store_true", default=None, help="fixed reduction order, single-threaded BLAS")
    _add_train_flags(p)

    p = sub.add_parser("render", help="render a view to PNG color and 16-bit depth")
    p.add_argument("--ckpt", required=True, type=Path)
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--view", type=int, help="camera index in --scene")
    g.add_argument("--camera", help="camera JSON (inline or a file path)")
    p.add_argument("--scene", type=Path)
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--depth-scale", type=float, default=1000.0, help="depth PNG codes per length unit")
    p.add_argument("--out", required=True, type=Path, help="color PNG path; depth goes to <stem>_depth.png")

    p = sub.add_parser("eval", help="score held-out views; writes a JSON report")
    p.add_argument("--ckpt", required=True, type=Path)
    p.add_argument("--scene", required=True, type=Path)
    p.add_argument("--views", default="test", help="test, train, all, or comma-separated indices")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--figures", type=Path, help="also write matplotlib figures into this directory")
    p.add_argument("--out", required=True, type=Path)
    return parser


def _load_toml(path: Path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as f:
        data = tomllib.load(f)
    return data.get("train", data)


def train_config_from_args(args) -> TrainConfig:
    """Merge flags over the optional TOML table over built-in defaults."""
    values = {dest: default for _, dest, _, default, _, _ in TRAIN_FLAGS}
    values.update(k_train=3, depth_loss="ranking", seed=0, threads=1, deterministic=False)
    if getattr(args, "config", None):
        table = _load_toml(args.config)
        unknown = set(table) - set(values)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(table)
    for key in list(values):
        flag_val = getattr(args, key, None)
        if flag_val is not None:
            values[key] = flag_val
    dcfg = DistillConfig(
        patch_size=values["patch_size"], pairs_per_patch=values["pairs_per_patch"], knn_k=values["knn_k"],
        knn_region=values["knn_region"], margin_rank=values["margin_rank"], margin_conti=values["margin_conti"],
        patches_per_iter=values["patches_per_iter"], knn_metric=values["knn_metric"],
    )
    return TrainConfig(
        iterations=values["iterations"], batch_rays=values["batch_rays"], lr_start=values["lr_start"],
        lr_end=values["lr_end"], weights=LossWeights(values["lambda_rank"], values["gamma_conti"]), distill=dcfg,
        depth_loss=values["depth_loss"], seed=values["seed"], k_train=values["k_train"],
        n_samples=values["n_samples"], arch=FieldArch(width=values["width"]),
        encoding=EncodingConfig(values["levels_pos"], values["levels_dir"]),
        checkpoint_every=values["checkpoint_every"], chunk_rays=values["chunk_rays"],
        threads=values["threads"], deterministic=bool(values["deterministic"]),
    )


def _cmd_synth(args) -> int:
    dist = PriorDistortion(args.prior_exponent, args.prior_noise)
    scene = make_synthetic_scene(args.preset, args.views, args.res, args.seed, dist)
    write_scene(scene, args.out)
    log.info("wrote %d views to %s", scene.n_views, args.out)
    return EXIT_OK


def _cmd_train(args) -> int:
    cfg = train_config_from_args(args)
    scene = load_scene(args.scene)
    log_path = args.log or args.out.parent / "log.jsonl"
    train(scene, cfg, checkpoint_path=args.out, log_path=log_path)
    log.info("checkpoint %s, log %s", args.out, log_path)
    return EXIT_OK


def _camera_from_json(text: str) -> Camera:
    if not text.lstrip().startswith("{"):
        text = Path(text).read_text()
    c = json.loads(text)
    return Camera(int(c["width"]), int(c["height"]), float(c["fx"]), float(c["fy"]), float(c["cx"]),
                  float(c["cy"]), np.array(c["transform"], dtype=np.float64).reshape(4, 4),
                  float(c["near"]), float(c["far"]))


def _cmd_render(args) -> int:
    from .renderer import render_image

    params, header = load_checkpoint(args.ckpt)
    n = args.samples or header.get("extra", {}).get("n_samples", 64)
    if args.view is not None:
        if args.scene is None:
            raise UsageError("--view requires --scene")
        scene = load_scene(args.scene)
        if not 0 <= args.view < scene.n_views:
            raise UsageError(f"--view {args.view} out of range (scene has {scene.n_views} views)")
        cam = scene.cameras[args.view]
    else:
        cam = _camera_from_json(args.camera)
    out = render_image(params, cam, n)
    io_utils.write_rgb_png(args.out, np.clip(out.color, 0, 1))
    depth_path = args.out.with_name(args.out.stem + "_depth.png")
    io_utils.write_gray16_png(depth_path, out.normalized_depth() * args.depth_scale)
    log.info("wrote %s and %s", args.out, depth_path)
    return EXIT_OK


def _parse_views(spec: str, scene, train_ids) -> list[int]:
    _, test = select_views(scene.n_views, max(1, len(train_ids) or 1)) if scene.n_views > 1 else ([], [0])
    if spec == "test":
        return test
    if spec == "train":
        return list(train_ids)
    if spec == "all":
        return list(range(scene.n_views))
    try:
        ids = [int(s) for s in spec.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad --views value {spec!r}") from exc
    if any(not 0 <= i < scene.n_views for i in ids):
        raise UsageError("--views index out of range")
    return ids


def _cmd_eval(args) -> int:
    from .evaluation import evaluate

    params, header = load_checkpoint(args.ckpt)
    extra = header.get("extra", {})
    scene = load_scene(args.scene)
    n = args.samples or extra.get("n_samples", 64)
    views = _parse_views(args.views, scene, extra.get("train_ids", []))
    report, renders = evaluate(params, scene, views, n, keep_renders=True)
    io_utils.atomic_write_text(args.out, json.dumps(report, indent=2))
    if args.figures:
        from .report import write_figures

        write_figures(args.figures, scene, renders, report)
    m = report["mean"]
    log.info("psnr %.2f ssim %.3f depth_error %s", m["psnr"] or float("nan"), m["ssim"] or float("nan"), m["depth_error"])
    return EXIT_OK


COMMANDS = {"synth": _cmd_synth, "train": _cmd_train, "render": _cmd_render, "eval": _cmd_eval}


def run(argv=None) -> int:
    level = os.environ.get("SPNF_LOG", "info").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (SceneFormatError, ValueError, FileNotFoundError) as exc:
        print(f"spnf: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingDiverged, OSError, RuntimeError) as exc:
        print(f"spnf: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
