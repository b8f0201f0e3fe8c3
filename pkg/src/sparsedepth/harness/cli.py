"""Command-line entry point: ``sparsedepth <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from ..depth_grid import DEFAULT_D_MAX, read_depth, read_rgb, write_depth
from ..net import checkpoint
from ..sparse_conv import saturation_profile
from ..sparsifier import PatternError, apply_pattern, describe, parse_pattern
from .baseline import baseline_fill, baseline_predictor
from .config import TrainConfig
from .data import read_scene_dir, scene_pool, write_scene_dir
from .evaluate import complete, evaluate_depth, evaluate_segmentation
from .experiments import DENSITY_GRID, LIDAR_LAYERS, experiment_density_sweep, experiment_lidar_ablation
from .train import train

BASELINE = "baseline"


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"size must look like 64x64, got {text!r}") from exc
    return h, w


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _layer_specs(text: str) -> list[tuple[int, int]]:
    """``"3x3s1,5x5s2"`` -> ``[(3, 1), (5, 2)]``."""
    specs = []
    for tok in text.split(","):
        tok = tok.strip().lower()
        try:
            kk, _, s = tok.partition("s")
            kh, kw = kk.split("x")
            if kh != kw:
                raise ValueError
            specs.append((int(kh), int(s) if s else 1))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"layer spec must look like 3x3s1, got {tok!r}") from exc
    return specs


def _load_models(names: str):
    models = {}
    d_max = None
    for name in names.split(","):
        name = name.strip()
        if name == BASELINE:
            models[name] = baseline_predictor
            continue
        net, meta = checkpoint.load(name)
        models[os.path.basename(name)] = net
        if "d_max" in meta:
            d_max = float(meta["d_max"])
    return models, d_max


def _eval_pool(args):
    if args.data:
        return read_scene_dir(args.data)
    h, w = args.size
    return scene_pool(args.scenes, 1_000_003 + args.seed, h, w, args.classes, args.dmax or DEFAULT_D_MAX)


# ---------------------------------------------------------------------------
# subcommands


def cmd_sparsify(args):
    dense = read_depth(args.inp)
    pattern = parse_pattern(args.pattern, args.seed)
    write_depth(args.out, apply_pattern(dense, pattern))
    print(f"{describe(pattern)} -> {args.out}")


def cmd_mask_analyze(args):
    prof = saturation_profile(args.density, args.layers, args.trials, args.size, args.seed)
    _write_csv(args.csv, ["layer", "kernel", "stride", "density", "saturation_mean", "saturation_std"],
               [[p.layer, k, s, f"{p.density:g}", f"{p.mean:.6f}", f"{p.std:.6f}"]
                for p, (k, s) in zip(prof, args.layers)])


def cmd_gen_scenes(args):
    h, w = args.size
    pool = scene_pool(args.count, args.seed, h, w, args.classes)
    names = write_scene_dir(pool, args.out)
    print(f"wrote {len(names)} scenes to {args.out}")


def cmd_train(args):
    cfg = TrainConfig.load(args.config)
    if args.task and args.task != cfg.task:
        cfg = cfg.replace(task=args.task)
    result = train(cfg, callback=_progress(cfg) if args.verbose else None)
    meta = result.meta()
    checkpoint.save(args.out, result.net, meta)
    if result.best_net is not None:
        checkpoint.save(args.out + ".best", result.best_net, dict(meta, best_metric=f"{result.best_metric:.6g}"))
    _write_csv(args.out + ".loss.csv", ["step", "loss"], [[i + 1, f"{v:.6f}"] for i, v in enumerate(result.losses)])
    print(f"trained {len(result.losses)} steps ({result.skipped} skipped), final loss "
          f"{meta['final_loss']} -> {args.out}")


def _progress(cfg):
    def cb(step, loss):
        if step % 50 == 0:
            print(f"step {step} loss {loss:.4f}", file=sys.stderr)
    return cb


def cmd_eval(args):
    net, meta = checkpoint.load(args.checkpoint)
    pool = read_scene_dir(args.data)
    patterns = [parse_pattern(args.pattern, args.seed + i) for i in range(len(pool))]
    cond = describe(patterns[0]).split("@")[0]
    if net.head_kind == "softmax_head":
        rep = evaluate_segmentation(net, pool, patterns)
        header, row = rep.csv_header(), rep.csv_row()
    else:
        d_max = args.dmax or float(meta.get("d_max", DEFAULT_D_MAX))
        rep = evaluate_depth(net, pool, patterns, d_max, args.eval_on)
        header, row = list(rep.CSV_HEADER), rep.csv_row()
    _write_csv(args.csv, ["checkpoint", "pattern", "seed", "n_scenes"] + list(header),
               [[os.path.basename(args.checkpoint), cond, args.seed, len(pool)] + row])


def cmd_complete(args):
    net, meta = checkpoint.load(args.checkpoint)
    sd = read_depth(args.in_depth)
    rgb = read_rgb(args.in_rgb) if args.in_rgb else None
    d_max = args.dmax or float(meta.get("d_max", DEFAULT_D_MAX))
    write_depth(args.out, complete(net, sd, rgb, d_max))


def _experiment(args, run, conditions):
    models, meta_dmax = _load_models(args.checkpoints)
    d_max = args.dmax or meta_dmax or DEFAULT_D_MAX
    pool = _eval_pool(args)
    res = run(models, conditions, pool=pool, seed=args.seed, d_max=d_max, eval_on=args.eval_on)
    res.write_csv(args.csv)


def cmd_sweep_density(args):
    _experiment(args, experiment_density_sweep, args.densities)


def cmd_ablate_lidar(args):
    _experiment(args, experiment_lidar_ablation, args.layers)


def cmd_baseline_fill(args):
    write_depth(args.out, baseline_fill(read_depth(args.inp)))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparsedepth", description="Sparse depth completion toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("sparsify", help="subsample a dense depth PNG")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--pattern", required=True, help="uniform:D | lidar:L | patches:N,MIN,MAX | cutout:...")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sparsify)

    s = sub.add_parser("mask-analyze", help="Monte-Carlo mask saturation per layer")
    s.add_argument("--density", type=float, required=True)
    s.add_argument("--layers", type=_layer_specs, default=_layer_specs("3x3s1"))
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--size", type=_size, default=(64, 64))
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_mask_analyze)

    s = sub.add_parser("gen-scenes", help="write synthetic RGB/depth/label scenes")
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--size", type=_size, default=(64, 64))
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen_scenes)

    s = sub.add_parser("train", help="train a network from a key=value config")
    s.add_argument("--task", choices=("depth", "seg"))
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--pattern", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dmax", type=float)
    s.add_argument("--eval-on", choices=("all", "unobserved"), default="all")
    s.add_argument("--csv", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("complete", help="complete one sparse depth PNG")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in-depth", required=True)
    s.add_argument("--in-rgb")
    s.add_argument("--dmax", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_complete)

    for name, func, flag, conv, default, helptext in (
            ("sweep-density", cmd_sweep_density, "--densities", _floats, DENSITY_GRID, "uniform density sweep"),
            ("ablate-lidar", cmd_ablate_lidar, "--layers", _ints, LIDAR_LAYERS, "lidar layer-count ablation")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoints", required=True, help=f"comma-separated paths; '{BASELINE}' adds the fill baseline")
        s.add_argument(flag, type=conv, default=list(default))
        s.add_argument("--data", help="scene directory (default: generated held-out scenes)")
        s.add_argument("--scenes", type=int, default=64)
        s.add_argument("--size", type=_size, default=(64, 64))
        s.add_argument("--classes", type=int, default=4)
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--dmax", type=float)
        s.add_argument("--eval-on", choices=("all", "unobserved"), default="all")
        s.add_argument("--csv", required=True)
        s.set_defaults(func=func)

    s = sub.add_parser("baseline-fill", help="nearest-valid-pixel fill of a sparse depth PNG")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_baseline_fill)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (ValueError, PatternError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
