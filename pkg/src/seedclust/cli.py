"""Command-line entry points.

Exit codes: 0 success, 2 configuration error (bad flags, bad config
file, invalid spec), 3 data error (missing or corrupt inputs),
4 numerical failure (non-finite loss).
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from PIL import Image

from .clustering import (ClusterConfig, cluster, load_cluster_result,
                         save_cluster_result)
from .evaluation import ap_gt, average_precision, save_margin_size_csv
from .fields import load_pixel_fields, save_pixel_fields
from .geometry import margin_to_sigma
from .labels import InstanceLabelMap
from .losses import LossConfig
from .model import ModelConfig, load_checkpoint
from .synthdata import (SceneSpec, dataset_manifest, generate, load_manifest,
                        load_scene, save_scene, scenes_from_manifest,
                        write_manifest)
from .trainer import (DEFAULT_GRID, NonFiniteLossError, TrainConfig,
                      evaluate_model, forward_scenes, run_ablation, train)
from . import viz

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


def _read_json(path, kind: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{kind} file not found: {path}")
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{kind} file {path} is not valid JSON: {e}") from e


def scene_spec_from_dict(d: dict) -> SceneSpec:
    d = dict(d)
    for key in ("shape", "instances_range", "small_radius", "large_radius", "elongation"):
        if key in d:
            d[key] = tuple(d[key])
    try:
        return SceneSpec(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid scene spec: {e}") from e


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    try:
        loss = LossConfig(**d.pop("loss", {}))
        cluster_cfg = ClusterConfig(**d.pop("cluster", {}))
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return TrainConfig(loss=loss, cluster=cluster_cfg, **d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid train config: {e}") from e


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    try:
        if "widths" in d:
            d["widths"] = tuple(d["widths"])
        return ModelConfig(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid model config: {e}") from e


def _require_empty(out_dir: Path, force: bool):
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise DataError(f"{out_dir} is not empty; pass --force to overwrite")


def _scene_name(index: int) -> str:
    return f"scene_{index:05d}"


def cmd_generate(args) -> int:
    spec_dict = _read_json(args.spec, "spec") if args.spec else {}
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = scene_spec_from_dict(spec_dict)
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    out_dir = Path(args.out)
    _require_empty(out_dir, args.force)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dataset_manifest(spec, args.count)
    write_manifest(out_dir / "manifest.json", manifest)
    for entry in manifest["scenes"]:
        scene = generate(spec, entry["index"])
        save_scene(out_dir / "scenes" / _scene_name(entry["index"]), scene)
    print(f"wrote {args.count} scenes and manifest to {out_dir}")
    return EXIT_OK


def _load_dataset(data):
    data = Path(data)
    manifest_path = data if data.is_file() else data / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"no manifest found at {manifest_path}")
    try:
        manifest = load_manifest(manifest_path)
    except ValueError as e:
        raise DataError(f"bad manifest {manifest_path}: {e}") from e
    train_scenes = scenes_from_manifest(manifest, split="train")
    val_scenes = scenes_from_manifest(manifest, split="val")
    return manifest, train_scenes, val_scenes


def cmd_train(args) -> int:
    config = _read_json(args.config, "config") if args.config else {}
    train_dict = dict(config.get("train", {}))
    for key in ("epochs", "seed"):
        value = getattr(args, key)
        if value is not None:
            train_dict[key] = value
    if args.sigma_mode or args.center_mode:
        loss = dict(train_dict.get("loss", {}))
        if args.sigma_mode:
            loss["sigma_mode"] = args.sigma_mode
        if args.center_mode:
            loss["center_mode"] = args.center_mode
        train_dict["loss"] = loss
    train_cfg = train_config_from_dict(train_dict)
    model_cfg = model_config_from_dict(config["model"]) if "model" in config else None
    _, train_scenes, val_scenes = _load_dataset(args.data)
    out_dir = Path(args.out)
    resume_from = None
    if args.resume:
        resume_from = out_dir / "checkpoint.npz"
        if not resume_from.is_file():
            raise DataError(f"--resume set but {resume_from} does not exist")
    result = train(train_cfg, train_scenes, val_scenes, model_cfg=model_cfg,
                   out_dir=out_dir, verbose=not args.quiet, resume_from=resume_from)
    print(f"checkpoint: {result.checkpoint_path}")
    return EXIT_OK


def _load_image(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("RGB"))
    return np.moveaxis(arr, -1, 0).astype(np.float32) / 255.0


def _collect_inputs(input_path) -> list:
    p = Path(input_path)
    if p.is_file():
        return [(p.stem, _load_image(p))]
    if p.is_dir():
        if (p / "image.png").is_file():
            return [(p.name, _load_image(p / "image.png"))]
        found = []
        for child in sorted(p.iterdir()):
            if child.is_dir() and (child / "image.png").is_file():
                found.append((child.name, _load_image(child / "image.png")))
            elif child.suffix.lower() == ".png":
                found.append((child.stem, _load_image(child)))
        if found:
            return found
        raise DataError(f"no images found under {p}")
    raise DataError(f"input not found: {p}")


def cmd_infer(args) -> int:
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.is_file():
        raise DataError(f"checkpoint not found: {ckpt_path}")
    loaded = load_checkpoint(ckpt_path)
    model = loaded.model
    cluster_cfg = ClusterConfig(min_pixels=args.min_pixels) if args.min_pixels \
        else ClusterConfig()
    inputs = _collect_inputs(args.input)
    out_dir = Path(args.out)
    _require_empty(out_dir, args.force)
    for name, image in inputs:
        h, w = image.shape[1:]
        d = loaded.config.downsample
        if h % d or w % d:
            raise DataError(f"{name}: size {h}x{w} not divisible by {d}")
        output = forward_scenes(model, [SimpleNamespace(image=image)], batch_size=1)[0]
        result = cluster(output, cluster_cfg)
        scene_dir = out_dir / name
        save_cluster_result(scene_dir, result)
        Image.fromarray(result.instance_map.astype(np.uint16)).save(
            scene_dir / "instance_map.png")
        viz.save_png(scene_dir / "overlay.png",
                     viz.instance_overlay(image, result.instance_map))
        if args.dump_fields:
            offsets = output.offsets.numpy()
            sigma = output.sigma.numpy()
            seeds = output.seeds.numpy()
            viz.dump_field_images(scene_dir / "dumps", offsets, sigma, seeds, h)
            save_pixel_fields(scene_dir / "activated", {
                "offsets": offsets.astype(np.float32),
                "sigma": sigma.astype(np.float32),
                "seeds": seeds.astype(np.float32),
            })
        print(f"{name}: {len(result.instances)} instances")
    return EXIT_OK


def _truth_scene_dirs(truth: Path) -> list:
    scenes_dir = truth / "scenes" if (truth / "scenes").is_dir() else truth
    dirs = [d for d in sorted(scenes_dir.iterdir())
            if d.is_dir() and (d / "meta.json").is_file()]
    if not dirs:
        raise DataError(f"no truth scenes under {truth}")
    return dirs


def _load_truth_labels(scene_dir: Path) -> InstanceLabelMap:
    try:
        return load_scene(scene_dir).labels
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise DataError(f"cannot load truth scene {scene_dir}: {e}") from e


def cmd_eval(args) -> int:
    truth = Path(args.truth)
    pred = Path(args.pred)
    if not truth.exists():
        raise DataError(f"truth directory not found: {truth}")
    if not pred.exists():
        raise DataError(f"prediction directory not found: {pred}")
    truth_dirs = _truth_scene_dirs(truth)
    truths = [_load_truth_labels(d) for d in truth_dirs]
    if args.gt_sampling:
        outputs = []
        for d in truth_dirs:
            fields_dir = pred / d.name / "activated"
            if not (fields_dir / "manifest.json").is_file():
                raise DataError(f"no activated field dump for {d.name} under {pred}")
            outputs.append(load_pixel_fields(fields_dir))
        fixed_sigma = None
        if args.fixed_margin_px:
            fixed_sigma = float(margin_to_sigma(args.fixed_margin_px / truths[0].shape[0]))
        report = ap_gt(outputs, truths, fixed_sigma=fixed_sigma)
    else:
        predictions = []
        for d in truth_dirs:
            pdir = pred / d.name
            if not (pdir / "instances.json").is_file():
                raise DataError(f"no prediction for {d.name} under {pred}")
            predictions.append(load_cluster_result(pdir))
        report = average_precision(predictions, truths)
    payload = report.as_record()
    text = json.dumps(payload, indent=2, sort_keys=True)
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    return EXIT_OK


def cmd_ablate(args) -> int:
    grid = DEFAULT_GRID
    if args.grid:
        raw = _read_json(args.grid, "grid")
        if not isinstance(raw, list) or not raw:
            raise ConfigError("grid file must be a non-empty JSON list of [sigma, center] pairs")
        grid = tuple((str(a), str(b)) for a, b in raw)
    config = _read_json(args.config, "config") if args.config else {}
    train_cfg = train_config_from_dict(config.get("train", {}))
    if args.epochs is not None:
        train_cfg = train_config_from_dict({**asdict(train_cfg), "epochs": args.epochs,
                                            "loss": asdict(train_cfg.loss),
                                            "cluster": asdict(train_cfg.cluster)})
    _, train_scenes, val_scenes = _load_dataset(args.data)
    out_dir = Path(args.out)
    _require_empty(out_dir, args.force)
    try:
        report = run_ablation(train_cfg, train_scenes, val_scenes, grid=grid,
                              out_dir=out_dir, verbose=not args.quiet)
    except ValueError as e:
        raise ConfigError(str(e)) from e
    # Margin-vs-size scatter per learned-sigma cell.
    for cell in report.cells:
        if cell.sigma_mode == "fixed":
            continue
        cell_dir = out_dir / f"{cell.sigma_mode}_{cell.center_mode}"
        loaded = load_checkpoint(cell_dir / "checkpoint.npz")
        loss_cfg = LossConfig(sigma_mode=cell.sigma_mode, center_mode=cell.center_mode)
        _, _, _, margins = evaluate_model(loaded.model, loss_cfg, val_scenes)
        viz.save_margin_size_scatter(
            cell_dir / "margin_vs_size.png", margins.pairs,
            title=f"{cell.sigma_mode}/{cell.center_mode}")
        save_margin_size_csv(cell_dir / "margin_vs_size.csv", margins.pairs)
    print(report.as_table())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="seedclust",
        description="Instance segmentation via spatial embeddings and seed-driven clustering",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic dataset")
    g.add_argument("--spec", help="JSON file of scene spec overrides")
    g.add_argument("--count", type=int, required=True, help="number of scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config", help="JSON file with train/model config sections")
    t.add_argument("--data", required=True, help="dataset directory or manifest path")
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--sigma-mode", choices=["fixed", "circular", "elliptical"])
    t.add_argument("--center-mode", choices=["centroid", "learnable"])
    t.add_argument("--resume", action="store_true")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="cluster instances in images")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--input", required=True, help="PNG file, scene dir, or directory of either")
    i.add_argument("--out", required=True)
    i.add_argument("--dump-fields", action="store_true")
    i.add_argument("--min-pixels", type=int, default=None)
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against truth scenes")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--gt-sampling", action="store_true",
                   help="oracle-center AP from dumped activated fields")
    e.add_argument("--fixed-margin-px", type=float, default=None)
    e.add_argument("--out", help="also write the report JSON here")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score every ablation cell")
    a.add_argument("--grid", help="JSON list of [sigma_mode, center_mode] pairs")
    a.add_argument("--config", help="JSON file with a train config section")
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--epochs", type=int, default=None)
    a.add_argument("--force", action="store_true")
    a.add_argument("--quiet", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
