"""Command-line interface: ``layerseg {synth,train-fg,train-hoc,distill,eval,render}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, TrainConfig, load_config, parse_config_text
from .images import ImageFormatError, load_image, save_image
from .scenes import (
    extract_hoc_patches,
    foreground_spec,
    hoc_spec,
    hoc_window,
    make_foreground_dataset,
    sample_scene,
)
from .training import (
    DivergenceError,
    distill,
    evaluate_foreground,
    evaluate_hoc,
    generator_from_checkpoint,
    predict_masks,
    sample_instances,
    train_foreground,
    train_hoc,
    unet_from_checkpoint,
)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("layerseg")


class DataError(RuntimeError):
    pass


# ------------------------------------------------------------------ dataset directories


def _write_stack(arrays, folder: Path, suffix: str) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    for k, arr in enumerate(arrays):
        save_image(arr, folder / f"{k:05d}{suffix}")


def _read_stack(folder: Path, channels: int) -> np.ndarray:
    files = sorted(folder.glob("*.ppm" if channels == 3 else "*.pgm"))
    if not files:
        raise DataError(f"no images found in {folder}")
    out = []
    for f in files:
        try:
            img = load_image(f)
        except ImageFormatError as exc:
            raise DataError(f"{f}: {exc}") from None
        if img.shape[0] != channels:
            raise DataError(f"{f}: expected {channels} channel(s), got {img.shape[0]}")
        out.append(img)
    shapes = {a.shape for a in out}
    if len(shapes) != 1:
        raise DataError(f"images in {folder} differ in size: {sorted(shapes)}")
    return np.stack(out)


def write_foreground_dir(root: Path, config: TrainConfig, seed: int) -> None:
    ds = make_foreground_dataset(foreground_spec(config.image_size), config.n_train + config.n_test, seed, config.n_backgrounds)
    train, test = ds.split(config.n_train)
    for name, part in (("train", train), ("test", test)):
        _write_stack(part.images, root / name / "images", ".ppm")
        _write_stack(part.masks, root / name / "masks", ".pgm")
    _write_stack(ds.backgrounds, root / "backgrounds", ".ppm")


def read_foreground_dir(root: Path, split: str) -> tuple[np.ndarray, np.ndarray | None, np.ndarray | None]:
    """Images, masks (if present) and background corpus (if present) for a split."""
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    base = root / split if (root / split).is_dir() else root
    images = _read_stack(base / "images", 3)
    masks = _read_stack(base / "masks", 1) if (base / "masks").is_dir() else None
    if masks is not None and len(masks) != len(images):
        raise DataError(f"{base}: {len(images)} images but {len(masks)} masks")
    bgs = _read_stack(root / "backgrounds", 3) if (root / "backgrounds").is_dir() else None
    return images, masks, bgs


def write_hoc_dir(root: Path, config: TrainConfig, seed: int) -> None:
    spec = hoc_spec()
    scene = sample_scene(spec, seed)
    root.mkdir(parents=True, exist_ok=True)
    save_image(scene.image, root / "scene.ppm")
    widest = 2.0 * spec.categories[0].size_range[1]
    patches = extract_hoc_patches(scene.image, hoc_window(widest), "h", config.n_train // 2, seed, out_size=64)
    _write_stack(patches, root / "patches", ".ppm")


def read_hoc_dir(root: Path) -> np.ndarray:
    if not root.is_dir():
        raise DataError(f"data directory {root} does not exist")
    folder = root / "patches" if (root / "patches").is_dir() else root
    patches = _read_stack(folder, 3)
    if patches.shape[1:] != (3, 64, 64):
        raise DataError(f"HOC patches must be 64x64, got {patches.shape[2:]}")
    return patches


# ------------------------------------------------------------------ commands


def _config(args, task: str) -> TrainConfig:
    base = TrainConfig.hoc() if task == "hoc" else TrainConfig.foreground(image_size=64)
    cfg = load_config(args.config, base) if args.config else base
    if cfg.task != task:
        raise ConfigError(f"config task is {cfg.task!r} but this command needs {task!r}")
    over = {}
    for key in ("seed", "steps", "precision"):
        val = getattr(args, key, None)
        if val is not None:
            over[key] = val
    return cfg.with_overrides(**over) if over else cfg


def _out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from None


def cmd_synth(args) -> dict:
    cfg = _config(args, args.task)
    out = _out_dir(args)
    if args.task == "fg":
        write_foreground_dir(out, cfg, cfg.seed)
    else:
        write_hoc_dir(out, cfg, cfg.seed)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    return {"out_dir": str(out), "task": args.task}


def cmd_train_fg(args) -> dict:
    cfg = _config(args, "fg")
    images, _, bgs = read_foreground_dir(Path(args.data), "train")
    if bgs is None:
        raise DataError(f"{args.data} has no backgrounds/ corpus")
    resume = _load_ckpt(args.resume) if args.resume else None
    arts = train_foreground(cfg, images, bgs, out_dir=_out_dir(args), resume=resume)
    return {"steps": len(arts.trace), "checkpoint": str(arts.checkpoint_path)}


def cmd_train_hoc(args) -> dict:
    cfg = _config(args, "hoc")
    patches = read_hoc_dir(Path(args.data))
    resume = _load_ckpt(args.resume) if args.resume else None
    arts = train_hoc(cfg, patches, out_dir=_out_dir(args), resume=resume)
    return {"steps": len(arts.trace), "checkpoint": str(arts.checkpoint_path)}


def cmd_distill(args) -> dict:
    teacher = _load_ckpt(args.teacher)
    cfg = parse_config_text(teacher.config_text)
    if args.config:
        cfg = load_config(args.config, cfg)
    over = {k: getattr(args, k) for k in ("seed", "precision") if getattr(args, k) is not None}
    if args.steps is not None:
        over["distill_steps"] = args.steps
    cfg = cfg.with_overrides(**over) if over else cfg
    images, _, bgs = read_foreground_dir(Path(args.data), "train")
    if bgs is None:
        raise DataError(f"{args.data} has no backgrounds/ corpus")
    arts = distill(teacher, images, bgs, cfg, out_dir=_out_dir(args))
    return {"steps": len(arts.distill_losses), "checkpoint": str(arts.checkpoint_path)}


def cmd_eval(args) -> dict:
    ckpt = _load_ckpt(args.checkpoint)
    cfg = parse_config_text(ckpt.config_text)
    precision = args.precision or cfg.precision
    kind = ckpt.rng_state.get("kind")
    if kind == "hoc":
        gen = generator_from_checkpoint(ckpt, cfg)
        report = evaluate_hoc(gen, args.samples, cfg.seed if args.seed is None else args.seed, precision)
        result = {
            "kind": kind,
            "single_instance_rate": report.single_instance_rate(cfg.area_target),
            "mean_area": float(np.mean(report.area_fractions)),
            "component_counts": report.component_counts,
        }
    else:
        if not args.data:
            raise DataError("--data is required to evaluate a segmenter")
        images, masks, _ = read_foreground_dir(Path(args.data), "test")
        if masks is None:
            raise DataError(f"{args.data} has no ground-truth masks")
        report = evaluate_foreground(unet_from_checkpoint(ckpt, cfg), images, masks, precision)
        result = {
            "kind": kind,
            "miou": report.miou,
            "mean_area": float(np.mean(report.area_fractions)),
            "component_counts": report.component_counts,
        }
    result["step"] = ckpt.rng_state.get("step")
    if args.out_dir:
        (_out_dir(args) / "metrics.json").write_text(json.dumps(result, indent=2), encoding="utf-8")
    return result


def cmd_render(args) -> dict:
    from .render import save_foreground_grid, save_hoc_grid

    ckpt = _load_ckpt(args.checkpoint)
    cfg = parse_config_text(ckpt.config_text)
    out = _out_dir(args)
    seed = cfg.seed if args.seed is None else args.seed
    with T.precision(args.precision or cfg.precision):
        if ckpt.rng_state.get("kind") == "hoc":
            gen = generator_from_checkpoint(ckpt, cfg)
            _, rgba = sample_instances(gen, args.samples, seed)
            save_hoc_grid(rgba, rgba[:, :3] * rgba[:, 3:4], out / "instances.ppm")
        else:
            if not args.data:
                raise DataError("--data is required to render a segmenter")
            images, _, bgs = read_foreground_dir(Path(args.data), "test")
            images = images[: args.samples]
            masks = predict_masks(unet_from_checkpoint(ckpt, cfg), images.astype(T.get_dtype()))
            if bgs is not None:
                pick = np.random.default_rng(seed).integers(len(bgs), size=len(images))
                comps = images * masks + bgs[pick] * (1.0 - masks)
            else:
                comps = images * masks
            save_foreground_grid(images, masks, comps, out / "segmentation.ppm")
    return {"out_dir": str(out)}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="layerseg", description="Layered compositing models: synthesize data, train, distill, evaluate and render.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out-dir", required=out_required)
        p.add_argument("--steps", type=int)
        p.add_argument("--precision", type=int, choices=(32, 64))
        return p

    p = common(sub.add_parser("synth", help="write a synthetic dataset"))
    p.add_argument("--task", choices=("fg", "hoc"), default="fg")
    p.set_defaults(func=cmd_synth)

    for name, func, text in (
        ("train-fg", cmd_train_fg, "adversarially train a foreground segmenter"),
        ("train-hoc", cmd_train_hoc, "train a shared instance generator on HOC patches"),
    ):
        p = common(sub.add_parser(name, help=text))
        p.add_argument("--data", required=True)
        p.add_argument("--resume", help="checkpoint to continue from")
        p.set_defaults(func=func)

    p = common(sub.add_parser("distill", help="train a student segmenter from a foreground run"))
    p.add_argument("--teacher", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_distill)

    p = common(sub.add_parser("eval", help="mIOU and component statistics"), out_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--samples", type=int, default=100)
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("render", help="dump instances, masks and composites as image grids"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--samples", type=int, default=16)
    p.set_defaults(func=cmd_render)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, ImageFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(json.dumps(result))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
