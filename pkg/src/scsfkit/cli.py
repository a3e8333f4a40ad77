"""Command-line entry point: ``scsfkit {gen,train,eval,infer,export}``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .checkpoint import CheckpointError, atomic_write_bytes
from .config import ConfigError, RunConfig, load_config
from .densegrid import SemanticVoxelGrid, dumps_grid, loads_grid
from .network import (
    SCSFModel,
    TrainConfig,
    forecast,
    load_training_state,
    persistence,
    render,
    save_training_state,
    semantic_windows,
    train,
    visibility_windows,
)
from .optim import AdamW
from .scenegen import Dataset, PlacementError, SceneConfig, generate_dataset, write_dataset
from .visibility import forecast_visibility
from .implicitfield import apply_visibility_mask

log = logging.getLogger("scsfkit")

DATA_ENV = "SCSFKIT_DATA"
REPORT_HEADER = "# scsfkit eval report v1"
MASKS = ("model", "oracle", "none")

# RGB per class id, cycled for larger tables
PALETTE = [
    (128, 128, 128),
    (160, 120, 80),
    (200, 200, 200),
    (40, 120, 200),
    (200, 60, 60),
    (250, 200, 30),
    (60, 180, 90),
    (150, 80, 200),
]


class CliError(RuntimeError):
    pass


def _default_root() -> Path | None:
    env = os.environ.get(DATA_ENV)
    return Path(env) if env else None


def _resolve(path: str | None, leaf: str) -> Path:
    if path:
        return Path(path)
    root = _default_root()
    if root is None:
        raise CliError(f"no path given and {DATA_ENV} is not set")
    return root / leaf


def _config(args) -> RunConfig:
    cfg = load_config(args.config, args.set)
    if getattr(args, "seed", None) is not None:
        cfg.scene.seed = args.seed
        cfg.train.seed = args.seed
        cfg.vis_train.seed = args.seed
    return cfg


# --- gen ---------------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = _resolve(args.out, "dataset")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc.strerror}") from exc
    if not os.access(out, os.W_OK):
        raise CliError(f"{out} is not writable")
    log.info("generating %d sequences into %s", cfg.data.sequences, out)
    seqs = generate_dataset(cfg.scene, cfg.data.sequences)
    manifest = write_dataset(seqs, out, cfg.scene)
    print(f"wrote {len(seqs)} sequences to {out} (config_hash={manifest['config_hash']})")
    return 0


# --- train -------------------------------------------------------------------------------


def _scene_matches(a: SceneConfig, model: SCSFModel) -> bool:
    c = model.config
    return (
        tuple(a.grid_extents) == tuple(c.output_extents)
        and np.isclose(a.voxel_size, c.output_voxel_size)
        and (c.mode != "semantic" or [x.name for x in a.class_table] == [x.name for x in c.classes])
    )


def cmd_train(args) -> int:
    cfg = _config(args)
    data = Dataset(_resolve(args.data, "dataset"))
    cfg.scene = data.config
    mode = "semantic" if args.mode == "semantic" else "visibility"
    tcfg: TrainConfig = cfg.train if mode == "semantic" else cfg.vis_train
    if args.steps is not None:
        tcfg.steps = args.steps
    out = _resolve(args.out, f"runs/{mode}")
    out.mkdir(parents=True, exist_ok=True)
    tcfg.checkpoint_dir = str(out)
    names = data.split("train")
    if args.sequence:
        names = [args.sequence]
    make = semantic_windows if mode == "semantic" else visibility_windows
    windows = [w for n in names for w in make(data.load(n))]
    if args.resume:
        model, opt, start = load_training_state(args.resume)
        if not _scene_matches(data.config, model):
            raise CliError(f"checkpoint {args.resume} geometry does not match dataset {data.root}")
    else:
        model = SCSFModel(cfg.network_config("semantic" if mode == "semantic" else "binary-visibility"))
        opt = AdamW(list(model.named_parameters()), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
        start = 0
    log.info("training %s model on %d windows for %d steps", mode, len(windows), tcfg.steps - start)
    train(model, windows, tcfg, log_path=out / "train_log.jsonl", optimizer=opt, start_step=start)
    final = out / "model.ckpt"
    save_training_state(final, model, opt, max(tcfg.steps, start))
    atomic_write_bytes(out / "run_config.json", json.dumps({"config_hash": cfg.config_hash(), "config": cfg.to_dict()}, indent=1).encode())
    print(f"saved {final} (config_hash={cfg.config_hash()})")
    return 0


# --- eval --------------------------------------------------------------------------------


def _metric_lines(prefix: str, pred: SemanticVoxelGrid, gt: SemanticVoxelGrid) -> tuple[list[str], dict]:
    rep = metrics.evaluate(pred, gt)
    return rep.to_lines(prefix), rep.to_dict()


def evaluate_dataset(data: Dataset, model: SCSFModel, vis_model: SCSFModel | None, split: str = "test", headline: str = "none"):
    """Per-scene metric dicts for unmasked, oracle-masked, model-masked and persistence forecasts."""
    if not _scene_matches(data.config, model):
        raise CliError("model geometry does not match the dataset")
    scenes = []
    for name in data.split(split):
        gs = data.load(name)
        for k, w in enumerate(semantic_windows(gs)):
            t = w.target
            target_idx = k + model.config.input_frames
            unmasked = render(model, w.inputs)
            variants = {"unmasked": unmasked}
            variants["oracle"] = apply_visibility_mask(unmasked, gs.visibility[target_idx])
            if vis_model is not None:
                past = gs.visibility[target_idx - vis_model.config.input_frames : target_idx]
                vis = forecast_visibility(vis_model, past)
                variants["model"] = apply_visibility_mask(unmasked, vis)
            variants["persistence"] = persistence(w)
            scene = {"scene": w.name}
            for key, pred in variants.items():
                scene[key] = metrics.evaluate(pred, t).to_dict()
            pick = {"none": "unmasked", "oracle": "oracle", "model": "model"}[headline]
            if pick not in variants:
                raise CliError("--mask model needs --vis-model")
            scene["headline"] = pick
            scenes.append(scene)
    return scenes


def _flatten(prefix: str, d: dict) -> list[str]:
    keys = ("iou", "miou", "movable_iou", "static_iou", "chamfer")
    lines = []
    for k in keys:
        v = d.get(k)
        lines.append(f"{prefix}{k}={'none' if v is None else repr(float(v))}")
    for name, v in d.get("per_class_iou", {}).items():
        lines.append(f"{prefix}class.{name}.iou={float(v)!r}")
    return lines


def aggregate(scenes: list[dict]) -> dict:
    out = {}
    variants = [k for k in scenes[0] if isinstance(scenes[0][k], dict)]
    for var in variants:
        agg = {}
        for key in ("iou", "miou", "movable_iou", "static_iou", "chamfer"):
            vals = [s[var][key] for s in scenes if s[var][key] is not None]
            agg[key] = float(np.mean(vals)) if vals else None
        names = sorted({n for s in scenes for n in s[var]["per_class_iou"]})
        agg["per_class_iou"] = {n: float(np.mean([s[var]["per_class_iou"][n] for s in scenes if n in s[var]["per_class_iou"]])) for n in names}
        out[var] = agg
    return out


def report_text(entry: dict, config_hash: str, headline: str) -> str:
    lines = [REPORT_HEADER, f"config_hash={config_hash}"]
    if "scene" in entry:
        lines.append(f"scene={entry['scene']}")
    if "scenes" in entry:
        lines.append(f"scene_count={entry['scenes']}")
    lines.append(f"headline={headline}")
    lines += _flatten("", entry[headline])
    for var in ("unmasked", "oracle", "model", "persistence"):
        if var in entry:
            lines += _flatten(f"{var}.", entry[var])
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    data = Dataset(_resolve(args.data, "dataset"))
    model, _ = SCSFModel.load(args.model)
    vis_model = SCSFModel.load(args.vis_model)[0] if args.vis_model else None
    if args.mask == "model" and vis_model is None:
        raise CliError("--mask model needs --vis-model")
    scenes = evaluate_dataset(data, model, vis_model, args.split, args.mask)
    if not scenes:
        raise CliError(f"split {args.split!r} is empty")
    out = _resolve(args.out, "eval")
    (out / "scenes").mkdir(parents=True, exist_ok=True)
    chash = data.manifest["config_hash"]
    pick = scenes[0]["headline"]
    for s in scenes:
        stem = s["scene"].replace("@", "_")
        atomic_write_bytes(out / "scenes" / f"{stem}.txt", report_text(s, chash, pick).encode())
        atomic_write_bytes(out / "scenes" / f"{stem}.json", json.dumps(s, indent=1).encode())
    agg = aggregate(scenes)
    agg["scenes"] = len(scenes)
    atomic_write_bytes(out / "aggregate.txt", report_text(agg, chash, pick).encode())
    atomic_write_bytes(out / "summary.json", json.dumps({"config_hash": chash, "headline": pick, "aggregate": agg, "scenes": scenes}, indent=1).encode())
    sys.stdout.write(report_text(agg, chash, pick))
    return 0


# --- infer / export ----------------------------------------------------------------------


def cmd_infer(args) -> int:
    data = Dataset(_resolve(args.data, "dataset"))
    model, _ = SCSFModel.load(args.model)
    name = args.sequence or data.split("test")[0]
    gs = data.load(name)
    w = semantic_windows(gs)[args.window]
    target_idx = args.window + model.config.input_frames
    if args.mask == "oracle":
        pred = apply_visibility_mask(render(model, w.inputs), gs.visibility[target_idx])
    elif args.mask == "model":
        if not args.vis_model:
            raise CliError("--mask model needs --vis-model")
        vis_model, _ = SCSFModel.load(args.vis_model)
        past = gs.visibility[target_idx - vis_model.config.input_frames : target_idx]
        pred = forecast(model, vis_model, w.inputs, past)
    else:
        pred = render(model, w.inputs)
    out = Path(args.out) if args.out else Path(f"{name}_forecast.grid")
    text = f"# config_hash={data.manifest['config_hash']}\n" + dumps_grid(pred)
    atomic_write_bytes(out, text.encode())
    print(f"wrote {out} ({int(pred.occupied().sum())} occupied voxels)")
    return 0


def read_grid_file(path) -> SemanticVoxelGrid:
    text = Path(path).read_text()
    body = "\n".join(line for line in text.splitlines() if not line.startswith("#"))
    return loads_grid(body + "\n")


def ply_text(grid: SemanticVoxelGrid) -> str:
    ijk = np.argwhere(grid.labels != 0)
    pts = grid.origin + (ijk + 0.5) * grid.voxel_size
    labels = grid.labels[tuple(ijk.T)] if len(ijk) else np.zeros(0, dtype=int)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(ijk)}",
        "property double x",
        "property double y",
        "property double z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "property int label",
        "end_header",
    ]
    for p, lab in zip(pts, labels):
        r, g, b = PALETTE[int(lab) % len(PALETTE)]
        lines.append(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {r} {g} {b} {int(lab)}")
    return "\n".join(lines) + "\n"


def cmd_export(args) -> int:
    grid = read_grid_file(args.input)
    if args.format == "sparse-text":
        text = dumps_grid(grid)
    elif args.format == "ply-points":
        text = ply_text(grid)
    else:
        raise CliError(f"unknown export format {args.format!r}")
    atomic_write_bytes(args.out, text.encode())
    print(f"wrote {args.out}")
    return 0


# --- entry -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scsfkit", description="Semantic scene forecasting toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="key=value config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override (repeatable)")
        if seed:
            sp.add_argument("--seed", type=int)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g)
    g.add_argument("--out", help=f"dataset directory (default ${DATA_ENV}/dataset)")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the semantic or visibility model")
    common(t)
    t.add_argument("--data")
    t.add_argument("--mode", choices=("semantic", "visibility"), default="semantic")
    t.add_argument("--steps", type=int)
    t.add_argument("--out", help="run directory for checkpoints and the loss log")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--sequence", help="train on this one sequence only")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate forecasts on a dataset split")
    e.add_argument("--data")
    e.add_argument("--model", required=True)
    e.add_argument("--vis-model")
    e.add_argument("--mask", choices=MASKS, default="none", help="which variant heads the report")
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="forecast one window and write the grid")
    i.add_argument("--data")
    i.add_argument("--model", required=True)
    i.add_argument("--vis-model")
    i.add_argument("--mask", choices=MASKS, default="none")
    i.add_argument("--sequence")
    i.add_argument("--window", type=int, default=0)
    i.add_argument("--out")
    i.set_defaults(func=cmd_infer)

    x = sub.add_parser("export", help="export a grid file for external viewers")
    x.add_argument("--input", required=True)
    x.add_argument("--format", required=True, help="sparse-text or ply-points")
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, PlacementError) as exc:
        print(f"scsfkit {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"scsfkit {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
