"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every command that
takes ``--out`` writes ``manifest.txt`` there: the command, seed, overrides,
resolved config and one ``file = name sha256`` line per artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attentive import AttentiveConfig, AttentiveSTIC, train_attentive
from .config import ConfigError, RunConfig, load_config
from .io import (
    Dataset,
    gen_gaussians_2d,
    gen_moons,
    gen_shapes,
    load_idx_dataset,
    load_model,
    tile_grid,
    write_pgm,
    write_ppm,
)
from .metrics import FeatureCloud, append_metrics_csv, cls_cross, frechet_distance, knn_precision_recall
from .samplers import ChainFailure, SamplerConfig, interpolate, refine_interpolation, synthesize
from .score import TraceEstimator, train_score_stic
from .trainer import clean_inputs, data_box, sampler_for, train, write_metrics_csv

logger = logging.getLogger("stic")

COMMANDS = ("train", "sample", "interpolate", "eval", "boundary-viz", "score-train", "attentive-train")
STREAMS = {"train": 1, "sample": 2, "eval": 3, "interpolate": 4}

PALETTE = np.array(
    [
        [230, 25, 75],
        [60, 180, 75],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 190],
        [0, 128, 128],
    ],
    dtype=np.uint8,
)
BACKGROUND = np.array([40, 40, 40], dtype=np.uint8)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_usage()}")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one subsystem, derived from the root seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[name],)))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def build_dataset(cfg: RunConfig) -> Dataset:
    kind = cfg.dataset
    if kind == "gaussians":
        return gen_gaussians_2d(cfg.classes, cfg.n_per_class, cfg.spread, cfg.data_seed)
    if kind == "moons":
        return gen_moons(cfg.n_per_class, cfg.noise, cfg.data_seed)
    if kind == "shapes":
        return gen_shapes(cfg.n_per_class, cfg.side, cfg.data_seed)
    if kind == "idx":
        if not cfg.idx_images or not cfg.idx_labels:
            raise ConfigError("dataset = idx needs idx_images and idx_labels")
        return load_idx_dataset(cfg.idx_images, cfg.idx_labels)
    raise ConfigError(f"unknown dataset {kind!r} (gaussians | moons | shapes | idx)")


def boundary_map(model, bounds, resolution: int) -> np.ndarray:
    """Argmax class at each cell centre; row 0 is the top (largest y)."""
    if tuple(model.input_shape) != (2,):
        raise ValueError(f"boundary map needs a 2-D input model, got input shape {model.input_shape}")
    if resolution < 1:
        raise ValueError("resolution must be positive")
    (x0, x1), (y0, y1) = _bounds2(bounds)
    xs = x0 + (np.arange(resolution) + 0.5) * (x1 - x0) / resolution
    ys = y1 - (np.arange(resolution) + 0.5) * (y1 - y0) / resolution
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], 1)
    out = np.empty(len(pts), dtype=np.int64)
    with T.no_grad():
        for s in range(0, len(pts), 8192):
            out[s : s + 8192] = model.forward_logits(pts[s : s + 8192]).data.argmax(-1)
    return out.reshape(resolution, resolution)


def _bounds2(bounds):
    b = np.asarray(bounds, dtype=np.float64)
    if b.shape == (2,):
        return (b[0], b[1]), (b[0], b[1])
    if b.shape == (2, 2):
        return (b[0, 0], b[0, 1]), (b[1, 0], b[1, 1])
    raise ValueError(f"bounds must be (lo, hi) or ((xlo, xhi), (ylo, yhi)), got {bounds}")


def render_classes(grid: np.ndarray, fake_index: int) -> np.ndarray:
    """(H, W) class grid -> (H, W, 3) bytes; the fake class is the background."""
    rgb = PALETTE[grid % len(PALETTE)]
    rgb[grid == fake_index] = BACKGROUND
    return rgb


def _write_ppm_bytes(path: Path, rgb: np.ndarray) -> None:
    h, w, _ = rgb.shape
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.astype(np.uint8).tobytes())


def _write_images(out: Path, images: np.ndarray, cols: int, prefix: str) -> list:
    """Each image plus one tiled grid; returns file names."""
    names = []
    gray = images.shape[1] == 1
    writer = write_pgm if gray else write_ppm
    ext = "pgm" if gray else "ppm"
    for i, img in enumerate(images):
        name = f"{prefix}_{i:03d}.{ext}"
        writer(img[0] if gray else img, out / name)
        names.append(name)
    grid = tile_grid(images, cols)
    name = f"{prefix}_grid.{ext}"
    writer(grid[0] if gray else grid, out / name)
    names.append(name)
    return names


def _write_points(path: Path, x: np.ndarray, labels=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y" + (",label" if labels is not None else "") + "\n")
        for i, p in enumerate(x):
            row = ",".join(repr(float(v)) for v in p)
            fh.write(row + (f",{int(labels[i])}" if labels is not None else "") + "\n")


def write_manifest(out: Path, command: str, seed: int, cfg: RunConfig, overrides: Sequence[str], files: Sequence[str]) -> None:
    lines = [f"command = {command}", f"seed = {seed}"]
    lines += [f"override = {o}" for o in overrides]
    lines += [f"config.{line}" for line in cfg.dump().splitlines()]
    for name in sorted(files):
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        lines.append(f"file = {name} {digest}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sampler(cfg: RunConfig, model, data: Optional[Dataset]) -> SamplerConfig:
    sconf = cfg.synth_config()
    if data is not None and tuple(model.input_shape) == tuple(data.shape):
        sconf = sampler_for(data, sconf)
    return sconf


def _synthesize(model, target: int, n: int, sconf: SamplerConfig, rng) -> np.ndarray:
    if isinstance(model, AttentiveSTIC):
        return model.sample_images(target, n, sconf, rng)
    x0 = None
    if sconf.clip_to is not None and sconf.init == "gaussian":
        x0 = rng.uniform(*sconf.clip_to, size=(n,) + tuple(model.input_shape))
        sconf = SamplerConfig(sconf.eps1, sconf.eps2, sconf.eps3, sconf.steps, sconf.layers, sconf.clip_to, "given")
    return synthesize(model, target, None, sconf, rng, n, x0).samples


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args, cfg: RunConfig, out: Path) -> list:
    data = build_dataset(cfg)
    tconf = cfg.train_config()
    rng = stream(args.seed, "train")
    ckpt_dir = out
    if args.command == "score-train":
        mode = cfg.trace_mode
        est = None if mode == "auto" else TraceEstimator(mode, cfg.probe_count)
        result = train_score_stic(tconf, data, rng, cfg.score_weight, est, probe_seed=args.seed, checkpoint_dir=ckpt_dir, seed=args.seed)
    elif args.command == "attentive-train":
        attn = AttentiveConfig(cfg.warmup_iters, cfg.feature_width, cfg.glimpses)
        result = train_attentive(tconf, data, rng, attn, checkpoint_dir=ckpt_dir, seed=args.seed)
    else:
        result = train(tconf, data, rng, checkpoint_dir=ckpt_dir, seed=args.seed)
    write_metrics_csv(out / "metrics.csv", result.metrics)
    for row in result.metrics:
        print(f"pass {row['pass']}: loss={row['loss']:.4f} train_acc={row['train_acc']:.3f}")
    return ["metrics.csv"] + [f"pass{row['pass']}.stic" for row in result.metrics]


def _need_ckpt(args):
    if not args.ckpt:
        raise UsageError(f"{args.command} needs --ckpt")
    return load_model(args.ckpt)[0]


def _data_if_configured(args, cfg):
    return build_dataset(cfg) if args.config else None


def cmd_sample(args, cfg: RunConfig, out: Path) -> list:
    model = _need_ckpt(args)
    if args.cls is None:
        raise UsageError("sample needs --class")
    if not 0 <= args.cls < model.num_real_classes:
        raise UsageError(f"--class must lie in [0, {model.num_real_classes})")
    sconf = _sampler(cfg, model, _data_if_configured(args, cfg))
    x = _synthesize(model, args.cls, args.n, sconf, stream(args.seed, "sample"))
    if x.ndim == 2:
        _write_points(out / "samples.csv", x)
        return ["samples.csv"]
    return _write_images(out, x, int(np.ceil(np.sqrt(len(x)))), f"class{args.cls}")


def cmd_interpolate(args, cfg: RunConfig, out: Path) -> list:
    model = _need_ckpt(args)
    if args.cls is None or args.to_cls is None:
        raise UsageError("interpolate needs --class and --to-class")
    sconf = _sampler(cfg, model, _data_if_configured(args, cfg))
    rng = stream(args.seed, "interpolate")
    a = _synthesize(model, args.cls, 1, sconf, rng)[0]
    b = _synthesize(model, args.to_cls, 1, sconf, rng)[0]
    path = interpolate(a, b, max(args.n, 2))
    x = refine_interpolation(path, model, args.cls, args.to_cls, sconf, rng, steps=args.refine) if args.refine else np.stack(path)
    if x.ndim == 2:
        _write_points(out / "interpolation.csv", x)
        return ["interpolation.csv"]
    return _write_images(out, x, len(x), "interp")


def cmd_eval(args, cfg: RunConfig, out: Path) -> list:
    model = _need_ckpt(args)
    data = build_dataset(cfg)
    sconf = _sampler(cfg, model, data)
    rng = stream(args.seed, "eval")
    C = data.num_classes
    n = cfg.samples_per_class
    gen = np.concatenate([_synthesize(model, c, n, sconf, rng) for c in range(C)])
    gen_y = np.repeat(np.arange(C), n)
    real = clean_inputs(data)
    template = model.descriptor
    results = {
        "cls_r": cls_cross(real, data.labels, gen, gen_y, template, cfg.eval_epochs, seed=args.seed),
        "cls_g": cls_cross(gen, gen_y, real, data.labels, template, cfg.eval_epochs, seed=args.seed),
    }
    fr = FeatureCloud.from_model(model, real, "real")
    fg = FeatureCloud.from_model(model, gen, "generated")
    results["frechet"] = frechet_distance(fr, fg)
    k = min(cfg.knn_k, len(fg) - 1, len(fr) - 1)
    results["precision"], results["recall"] = knn_precision_recall(fr, fg, k)
    run_id = f"{Path(args.ckpt).stem}-seed{args.seed}"
    append_metrics_csv(out / "eval.csv", run_id, results)
    for key, v in results.items():
        print(f"{key} = {v:.4f}")
    return ["eval.csv"]


def cmd_boundary(args, cfg: RunConfig, out: Path) -> list:
    model = _need_ckpt(args)
    if args.bounds:
        bounds = tuple(float(v) for v in args.bounds.split(","))
        if len(bounds) == 4:
            bounds = (bounds[:2], bounds[2:])
    else:
        bounds = data_box(build_dataset(cfg)) if args.config else (-2.0, 2.0)
    grid = boundary_map(model, bounds, args.grid)
    _write_ppm_bytes(out / "boundary.ppm", render_classes(grid, model.fake_class_index))
    return ["boundary.ppm"]


HANDLERS = {
    "train": cmd_train,
    "score-train": cmd_train,
    "attentive-train": cmd_train,
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "eval": cmd_eval,
    "boundary-viz": cmd_boundary,
}


def make_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stic", description="Self-trained image classifier pipeline.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="flat key = value file")
        s.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        s.add_argument("--seed", type=int, default=0)
        s.add_argument("--out", default="runs/latest")
        if name not in ("train", "score-train", "attentive-train"):
            s.add_argument("--ckpt", help="checkpoint written by a train command")
        if name in ("sample", "interpolate"):
            s.add_argument("--class", dest="cls", type=int)
            s.add_argument("--n", type=int, default=16)
        if name == "interpolate":
            s.add_argument("--to-class", dest="to_cls", type=int)
            s.add_argument("--refine", type=int, default=0, help="GRMALA steps applied along the path")
        if name == "boundary-viz":
            s.add_argument("--grid", type=int, default=256)
            s.add_argument("--bounds", help="lo,hi or xlo,xhi,ylo,yhi")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"missing command (one of {', '.join(COMMANDS)})\n\n{parser.format_usage()}")
        if args.command in ("train", "score-train", "attentive-train") and not args.config:
            sub_usage = parser._subparsers._group_actions[0].choices[args.command].format_help()
            raise UsageError(f"{args.command} needs --config\n\n{sub_usage}")
        cfg = load_config(args.config, args.overrides)
    except UsageError as err:
        print(f"stic: error: {err}", file=sys.stderr)
        return 1
    except (ConfigError, OSError) as err:
        print(f"stic: error: {err}", file=sys.stderr)
        return 1
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        files = HANDLERS[args.command](args, cfg, out)
        write_manifest(out, args.command, args.seed, cfg, args.overrides, files)
    except UsageError as err:
        print(f"stic: error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, ChainFailure, RuntimeError) as err:
        print(f"stic: failed: {err}", file=sys.stderr)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())
