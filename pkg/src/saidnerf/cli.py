"""Command-line entry point: ``saidnerf <subcommand> [options]``.

Exit codes: 0 on success, 2 on a usage error, 1 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .dataset import SceneDataset, read_depth_png, read_png, write_depth_png, write_mask_png, write_rgb_png
from .field import FieldConfig, load_checkpoint
from .metrics import aggregate_metrics, compute_metrics
from .pointcloud import build_pointcloud, write_ply
from .renderer import RenderConfig, SamplerConfig, render_image

log = logging.getLogger("saidnerf")


class UsageError(Exception):
    """Bad arguments discovered after parsing (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _views(text: str | None):
    if text is None:
        return None
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--views expects comma-separated integers, got {text!r}") from None


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    cfg = json.loads(Path(path).read_text())
    unknown = set(cfg) - {"field", "train", "weights", "scene"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _pick(cls, data: dict) -> dict:
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return dict(data)


def _sidecar(checkpoint) -> Path:
    return Path(str(checkpoint) + ".json")


def _load_trained(checkpoint):
    """Parameters, field config and occupancy grid for a checkpoint written by ``train``."""
    from .training import rebuild_grid

    meta = json.loads(_sidecar(checkpoint).read_text())
    field_cfg = FieldConfig.from_dict(meta["field"])
    params = load_checkpoint(checkpoint, field_cfg)
    occ = meta.get("occupancy", {})
    grid = rebuild_grid(params, field_cfg, occ.get("resolution", 32), occ.get("threshold", 5.0))
    return params, field_cfg, grid, meta


def _render_views(ds: SceneDataset, checkpoint, views, n_samples: int):
    params, field_cfg, grid, meta = _load_trained(checkpoint)
    strategy = meta.get("train", {}).get("sampler", "occupancy")
    rcfg = RenderConfig(bounds=ds.bounds, sampler=SamplerConfig(n_samples=n_samples, strategy=strategy))
    for v in views:
        yield v, render_image(ds.camera(v), params, field_cfg, rcfg, grid=grid)


def cmd_synth(args, cfg):
    from .scenegen import SyntheticScene, default_scene, generate_dataset

    if args.scene:
        scene = SyntheticScene.load(args.scene)
    elif "scene" in cfg:
        scene = SyntheticScene.from_dict(cfg["scene"])
    else:
        scene = default_scene(args.width, args.height, args.views)
    ds = generate_dataset(scene, args.views, args.seed, args.out, channels=args.channels, test_every=args.test_every)
    print(f"wrote {len(ds)} views ({ds.width}x{ds.height}, {ds.semantic_channels} channels) to {args.out}")


def cmd_maskgroup(args, cfg):
    from .maskhier import group_directory

    chans = group_directory(args.input, args.channels, args.out, args.min_area)
    print(f"wrote {len(chans)} channels to {args.out}; on-pixels per channel: {chans.sum(axis=(1, 2)).tolist()}")


def cmd_train(args, cfg):
    from .training import LossWeights, TrainConfig, train

    ds = SceneDataset.load(args.data)
    tdict = _pick(TrainConfig, cfg.get("train", {}))
    tdict["rng_seed"] = args.seed
    if args.time_limit_s is not None:
        tdict["time_limit_s"] = args.time_limit_s
    for key in ("max_steps", "workers", "grad_chunks", "precision"):
        if getattr(args, key) is not None:
            tdict[key] = getattr(args, key)
    views = _views(args.views)
    if views is not None:
        tdict["train_views"] = tuple(views)
    elif "train_views" in tdict and tdict["train_views"] is not None:
        tdict["train_views"] = tuple(tdict["train_views"])
    tdict["log_path"] = args.log
    tdict["checkpoint_path"] = args.out
    tcfg = TrainConfig(**tdict)
    weights = LossWeights(**_pick(LossWeights, cfg.get("weights", {})))
    fdict = {**cfg.get("field", {}), "semantic_channels": ds.semantic_channels, "seed": args.seed}
    field_cfg = FieldConfig.from_dict(fdict)
    res = train(ds, tcfg, weights, field_cfg)
    meta = {
        "field": field_cfg.to_dict(),
        "train": {k: v for k, v in asdict(tcfg).items() if k not in ("log_path", "checkpoint_path")},
        "weights": asdict(weights),
        "occupancy": {"resolution": tcfg.occupancy_resolution, "threshold": tcfg.occupancy_threshold},
    }
    _sidecar(args.out).write_text(json.dumps(meta, indent=1))
    last = res.log[-1]
    print(f"trained {res.steps} steps in {res.wall_s:.2f} s; final loss {last['loss']:.5f}; checkpoint {args.out}")


def cmd_render(args, cfg):
    ds = SceneDataset.load(args.data)
    views = _views(args.views) or list(range(len(ds)))
    out = Path(args.out)
    for sub in ("rgb", "depth", "semantics"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    for v, img in _render_views(ds, args.checkpoint, views, args.samples):
        stem = ds.stems[v]
        write_rgb_png(out / "rgb" / f"{stem}.png", img["color"])
        write_depth_png(out / "depth" / f"{stem}.png", np.where(img["opacity"] >= args.opacity_threshold, img["depth"], 0.0))
        sem = img["semantics"]
        for k in range(sem.shape[-1]):
            write_mask_png(out / "semantics" / f"{stem}_chan{k}.png", sem[..., k] > 0.5)
        np.save(out / "semantics" / f"{stem}.npy", sem.astype(np.float32))
    print(f"rendered {len(views)} view(s) to {out}")


def _read_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path).astype(np.float64)
    return read_depth_png(path)


def cmd_eval(args, cfg):
    if args.pred or args.gt:
        if not (args.pred and args.gt):
            raise UsageError("--pred and --gt go together")
        if args.data or args.checkpoint:
            raise UsageError("use either --pred/--gt or --data/--checkpoint")
        mask = None if args.mask is None else read_png(args.mask) > 0
        m = compute_metrics(_read_depth(args.pred), _read_depth(args.gt), mask)
    else:
        if not (args.data and args.checkpoint):
            raise UsageError("eval needs --pred/--gt or --data/--checkpoint")
        ds = SceneDataset.load(args.data)
        if ds.depth_gt is None:
            raise UsageError(f"{args.data} has no depth_gt/ rasters")
        if args.mask_only and ds.transparent is None:
            raise UsageError(f"{args.data} has no transparent/ masks for --mask-only")
        views = _views(args.views) or list(range(len(ds)))
        per_view = []
        for v, img in _render_views(ds, args.checkpoint, views, args.samples):
            valid = ds.depth_gt[v] > 0
            if args.mask_only:
                valid &= ds.transparent[v]
            if valid.any():
                per_view.append(compute_metrics(img["depth"], ds.depth_gt[v], valid))
        m = aggregate_metrics(per_view)
    print(json.dumps(m.as_dict(), indent=1))


def cmd_export_ply(args, cfg):
    ds = SceneDataset.load(args.data)
    views = _views(args.views) or list(range(len(ds)))
    cams = [ds.camera(v) for v in views]
    if args.checkpoint:
        if args.depth_source != "render":
            raise UsageError("--depth-source must be 'render' with --checkpoint")
        rendered = dict(_render_views(ds, args.checkpoint, views, args.samples))
        depths = [rendered[v]["depth"] for v in views]
        colors = [rendered[v]["color"] for v in views]
        opac = [rendered[v]["opacity"] for v in views]
    else:
        if args.depth_source == "render":
            raise UsageError("rendered depth needs --checkpoint")
        src = ds.depth_gt if args.depth_source == "gt" else ds.depth
        if src is None:
            raise UsageError(f"{args.data} has no {args.depth_source} depth")
        depths = [src[v] for v in views]
        colors = [ds.rgb[v] for v in views]
        opac = None
    pts, rgb, _, _ = build_pointcloud(cams, depths, colors, opac, args.opacity_threshold, args.filter_radius)
    write_ply(args.out, pts, rgb)
    print(f"wrote {len(pts)} points to {args.out}")


_GLOBAL_DEFAULTS = {"seed": 0, "config": None, "time_limit_s": None, "verbose": False}


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand; SUPPRESS keeps the
    # subparser from overwriting a value given earlier with its default
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, help="random seed (default 0)")
    common.add_argument("--config", help="JSON file with optional 'field', 'train', 'weights', 'scene' sections")
    common.add_argument("--time-limit-s", type=float, help="training wall-clock cap in seconds")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="saidnerf", parents=[common],
                description="Train a hash-grid radiance field with mask channels and recover depth of glassware.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    p.set_defaults(command=None)

    s = sub.add_parser("synth", parents=[common], help="trace a synthetic scene into a scene directory")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--width", type=int, default=64)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--test-every", type=int, default=0)
    s.add_argument("--scene", help="scene JSON (default: built-in sphere-on-table scene)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("maskgroup", parents=[common], help="group instance masks into semantic channels")
    s.add_argument("--in", dest="input", required=True, help="directory of binary PNG masks")
    s.add_argument("--out", required=True)
    s.add_argument("--channels", type=int, default=3)
    s.add_argument("--min-area", type=int, default=16)
    s.set_defaults(func=cmd_maskgroup)

    s = sub.add_parser("train", parents=[common], help="fit a field to a scene directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True, help="checkpoint path; a .json sidecar is written next to it")
    s.add_argument("--log", help="NDJSON training log")
    s.add_argument("--views", help="comma-separated training view indices")
    s.add_argument("--max-steps", type=int)
    s.add_argument("--workers", type=int)
    s.add_argument("--grad-chunks", type=int)
    s.add_argument("--precision", choices=("float32", "float64"))
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", parents=[common], help="render colour, depth and semantics")
    s.add_argument("--data", required=True)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--opacity-threshold", type=float, default=0.5)
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", parents=[common], help="depth metrics for rasters or a trained field")
    s.add_argument("--pred", help="predicted depth (.npy metres or 16-bit PNG millimetres)")
    s.add_argument("--gt", help="ground-truth depth, same encodings")
    s.add_argument("--mask", help="optional PNG restricting the evaluated pixels")
    s.add_argument("--data")
    s.add_argument("--checkpoint")
    s.add_argument("--views")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--mask-only", action="store_true", help="only transparent-surface pixels")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("export-ply", parents=[common], help="back-project depth into an ASCII PLY")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--depth-source", choices=("render", "gt", "sensor"), default="render")
    s.add_argument("--views")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--opacity-threshold", type=float, default=0.5)
    s.add_argument("--filter-radius", type=float)
    s.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parser.parse_args(argv)
        for key, default in _GLOBAL_DEFAULTS.items():
            if not hasattr(args, key):
                setattr(args, key, default)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return 2
        cfg = _load_config(args.config)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (OSError, ValueError) as exc:
        print(f"saidnerf: cannot read config: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args, cfg)
    except UsageError as exc:
        print(f"saidnerf {args.command}: {exc}", file=sys.stderr)
        return 2
    except (ValueError, ArithmeticError, RuntimeError, OSError, KeyError) as exc:
        print(f"saidnerf {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
