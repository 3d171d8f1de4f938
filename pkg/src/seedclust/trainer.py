"""Training loop, finite-difference gradient verification, and the
sigma/center ablation grid.

Training uses Adam with polynomial learning-rate decay
lr(e) = lr0 * (1 - e/epochs)^0.9 and random horizontal mirroring; a
mirrored sample flips both image and label map, so every loss target is
recomputed in the flipped frame and the offset x-component learns its
sign change implicitly. Evaluation always runs on a frozen snapshot
(eval mode, no grad) of the current weights.
"""

import json
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .clustering import ClusterConfig
from .evaluation import MatchSpec, ap_gt, margin_size_correlation
from .geometry import margin_to_sigma
from .labels import InstanceLabelMap
from .losses import LossConfig, total_loss
from .model import ModelConfig, Network, activate_heads, load_checkpoint, save_checkpoint
from .synthdata import InstanceScene, scenes_from_manifest

# The five ablation rows: bandwidth parametrization x center definition.
DEFAULT_GRID = (
    ("fixed", "centroid"),
    ("circular", "centroid"),
    ("circular", "learnable"),
    ("elliptical", "centroid"),
    ("elliptical", "learnable"),
)

# Bounding-box long-side boundary between the "small" and "large" object
# subsets reported by the ablation. Extent, not area: a thin bar has few
# pixels but a radial clustering margin still has to span its length.
# 42 clears the small regime entirely (half-length 20 tops out at 41 px)
# so the large subset holds only frame-scale objects.
EXTENT_SPLIT_PX = 42


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    learning_rate: float = 5e-4
    poly_power: float = 0.9
    adam_betas: tuple = (0.9, 0.999)
    loss: LossConfig = field(default_factory=LossConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    eval_every: int = 5
    flip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if not self.poly_power >= 0:
            raise ValueError(f"poly_power must be non-negative, got {self.poly_power}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if not (0.0 <= self.flip_prob <= 1.0):
            raise ValueError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")


def poly_lr(cfg: TrainConfig, epoch: int) -> float:
    """lr0 * (1 - epoch/epochs)^power, exactly 0 at epoch == epochs."""
    if cfg.epochs == 0:
        return cfg.learning_rate
    frac = 1.0 - epoch / cfg.epochs
    return cfg.learning_rate * (frac ** cfg.poly_power if frac > 0 else 0.0)


def fixed_sigma_for(loss_cfg: LossConfig, grid_height: int):
    """The shared bandwidth implied by the fixed margin, or None when the
    bandwidth is learned."""
    if loss_cfg.sigma_mode != "fixed":
        return None
    return float(margin_to_sigma(loss_cfg.fixed_margin_px / grid_height))


def _flip_scene(scene: InstanceScene) -> InstanceScene:
    return InstanceScene(
        image=np.ascontiguousarray(scene.image[:, :, ::-1]),
        labels=scene.labels.hflip(),
        index=scene.index,
    )


def forward_scenes(model: Network, scenes: list, batch_size: int = 8) -> list:
    """Model outputs for a list of scenes, eval mode, no gradients."""
    outputs = []
    model.eval()
    with torch.no_grad():
        for start in range(0, len(scenes), batch_size):
            chunk = scenes[start:start + batch_size]
            batch = torch.from_numpy(np.stack([s.image for s in chunk]))
            out = model(batch)
            outputs.extend(out[i] for i in range(len(chunk)))
    return outputs


@dataclass
class TrainResult:
    model: Network
    records: list
    checkpoint_path: Path = None
    out_dir: Path = None


def _dump_bad_batch(out_dir, scenes: list, epoch: int, step: int, report) -> Path:
    directory = Path(out_dir) if out_dir else Path.cwd()
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"bad_batch_epoch{epoch}_step{step}.npz"
    arrays = {f"image_{i}": s.image for i, s in enumerate(scenes)}
    arrays.update({f"labels_{i}": s.labels.ids for i, s in enumerate(scenes)})
    meta = {
        "epoch": epoch,
        "step": step,
        "indices": [s.index for s in scenes],
        "class_of": [{str(k): v for k, v in s.labels.class_of.items()} for s in scenes],
        "loss_terms": report.scalars() if report is not None else None,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    return path


def default_model_config(train_cfg: TrainConfig, scenes: list,
                         init_seed: int = 0) -> ModelConfig:
    num_classes = 1
    for scene in scenes:
        for c in scene.labels.class_of.values():
            num_classes = max(num_classes, c + 1)
    return ModelConfig(
        num_classes=num_classes,
        sigma_channels=train_cfg.loss.sigma_channels,
        init_seed=init_seed,
    )


def train(train_cfg: TrainConfig, train_scenes: list, val_scenes: list,
          model_cfg: ModelConfig = None, out_dir=None, verbose: bool = False,
          match_spec: MatchSpec = None, resume_from=None) -> TrainResult:
    """Optimize a network on the given scenes.

    Writes, when out_dir is set: config.json (echo of every config),
    metrics.ndjson (one JSON record per epoch), checkpoint.npz. A
    non-finite loss aborts with the offending batch dumped to disk.
    Resuming from a checkpoint picks the lr schedule up at the stored
    epoch; shuffles and flips are keyed on (seed, epoch), so a resumed
    run sees the same batches a continuous run would have.
    """
    if not train_scenes:
        raise ValueError("no training scenes")
    start_epoch = 0
    resumed = None
    if resume_from is not None:
        resumed = load_checkpoint(resume_from)
        model_cfg = resumed.config
        start_epoch = resumed.epoch
        if start_epoch > train_cfg.epochs:
            raise ValueError(
                f"checkpoint is at epoch {start_epoch}, beyond epochs={train_cfg.epochs}"
            )
    if model_cfg is None:
        model_cfg = default_model_config(train_cfg, train_scenes)
    if train_cfg.loss.sigma_mode != "fixed" \
            and model_cfg.sigma_channels != train_cfg.loss.sigma_channels:
        raise ValueError(
            f"model has {model_cfg.sigma_channels} sigma channels but the "
            f"{train_cfg.loss.sigma_mode} loss needs {train_cfg.loss.sigma_channels}"
        )
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.json", "w") as fh:
            json.dump({"model": asdict(model_cfg), "train": asdict(train_cfg)},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        metrics_fh = open(out_dir / "metrics.ndjson", "a" if resumed else "w")

    torch.manual_seed(train_cfg.seed)
    if resumed is not None:
        model = resumed.model
        optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                                     betas=train_cfg.adam_betas)
        if resumed.optimizer_state is not None:
            optimizer.load_state_dict(resumed.optimizer_state)
    else:
        model = Network(model_cfg)
        optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.learning_rate,
                                     betas=train_cfg.adam_betas)
    grid_height = train_scenes[0].shape[0] if hasattr(train_scenes[0], "shape") \
        else train_scenes[0].image.shape[1]
    fixed_sigma = fixed_sigma_for(train_cfg.loss, grid_height)
    records = []
    try:
        for epoch in range(start_epoch, train_cfg.epochs):
            lr = poly_lr(train_cfg, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            model.train()
            rng = np.random.default_rng([train_cfg.seed, 1, epoch])
            order = rng.permutation(len(train_scenes))
            term_sums = {"loss_total": 0.0, "loss_instance": 0.0,
                         "loss_seed": 0.0, "loss_smooth": 0.0}
            n_batches = 0
            for start in range(0, len(order), train_cfg.batch_size):
                batch_idx = order[start:start + train_cfg.batch_size]
                scenes = []
                for i in batch_idx:
                    scene = train_scenes[int(i)]
                    if rng.random() < train_cfg.flip_prob:
                        scene = _flip_scene(scene)
                    scenes.append(scene)
                images = torch.from_numpy(np.stack([s.image for s in scenes]))
                out = model(images)
                reports = [total_loss(out[i], s.labels, train_cfg.loss)
                           for i, s in enumerate(scenes)]
                batch_loss = torch.stack([r.total for r in reports]).mean()
                if not torch.isfinite(batch_loss):
                    bad = next((r for r in reports
                                if not torch.isfinite(r.total)), None)
                    path = _dump_bad_batch(out_dir, scenes, epoch, n_batches, bad)
                    raise NonFiniteLossError(
                        f"non-finite loss at epoch {epoch}, batch {n_batches}; "
                        f"batch dumped to {path}"
                    )
                optimizer.zero_grad()
                batch_loss.backward()
                optimizer.step()
                for report in reports:
                    for key, value in report.scalars().items():
                        term_sums[key] += value / len(reports)
                n_batches += 1
            record = {"epoch": epoch, "lr": lr}
            record.update({k: v / max(n_batches, 1) for k, v in term_sums.items()})
            last = epoch == train_cfg.epochs - 1
            if val_scenes and ((epoch + 1) % train_cfg.eval_every == 0 or last):
                outputs = forward_scenes(model, val_scenes, train_cfg.batch_size)
                report = ap_gt(outputs, [s.labels for s in val_scenes],
                               spec=match_spec, fixed_sigma=fixed_sigma)
                record["ap_gt"] = report.ap
                record["ap_gt_50"] = report.ap50
            records.append(record)
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                metrics_fh.flush()
            if verbose:
                shown = {k: (round(v, 4) if isinstance(v, float) else v)
                         for k, v in record.items()}
                print(shown)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    checkpoint_path = None
    if out_dir is not None:
        checkpoint_path = save_checkpoint(
            out_dir / "checkpoint.npz", model,
            epoch=train_cfg.epochs, optimizer=optimizer,
            extra={"train_config": asdict(train_cfg)},
        )
    return TrainResult(model=model, records=records,
                       checkpoint_path=checkpoint_path, out_dir=out_dir)


def train_from_manifest(train_cfg: TrainConfig, manifest: dict,
                        model_cfg: ModelConfig = None, out_dir=None,
                        verbose: bool = False) -> TrainResult:
    train_scenes = scenes_from_manifest(manifest, split="train")
    val_scenes = scenes_from_manifest(manifest, split="val")
    return train(train_cfg, train_scenes, val_scenes, model_cfg=model_cfg,
                 out_dir=out_dir, verbose=verbose)


@dataclass
class HeadGradReport:
    name: str
    n_checked: int
    n_skipped: int
    max_rel_err: float
    worst_coord: tuple
    failures: list

    def passed(self, tolerance: float) -> bool:
        return not self.failures and self.max_rel_err <= tolerance


@dataclass
class GradCheckReport:
    heads: dict
    seed_detach_offset_max: float
    seed_detach_sigma_max: float
    tolerance: float
    step: float
    seconds: float

    @property
    def max_rel_err(self) -> float:
        return max((h.max_rel_err for h in self.heads.values()), default=0.0)

    @property
    def passed(self) -> bool:
        heads_ok = all(h.passed(self.tolerance) for h in self.heads.values())
        return heads_ok and self.seed_detach_offset_max == 0.0 \
            and self.seed_detach_sigma_max == 0.0

    def summary(self) -> str:
        lines = []
        for h in self.heads.values():
            lines.append(
                f"{h.name}: max rel err {h.max_rel_err:.3e} over {h.n_checked} coords "
                f"({h.n_skipped} below floor), {len(h.failures)} failures"
            )
        lines.append(
            f"seed-term detachment: offset {self.seed_detach_offset_max:.1e}, "
            f"sigma {self.seed_detach_sigma_max:.1e}"
        )
        lines.append(f"{'PASS' if self.passed else 'FAIL'} at tolerance {self.tolerance:g}")
        return "\n".join(lines)


# Coordinates where both the analytic and FD gradient are this small carry
# no signal; they are skipped rather than divided into noise.
GRAD_SKIP_FLOOR = 1e-6


def grad_check(loss_cfg: LossConfig, scene, tolerance: float = 1e-3,
               step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients on the raw head tensors with 64-bit
    central finite differences, coordinate by coordinate.

    The seed term regresses the seed maps toward a frozen copy of phi, so
    the true objective has no seed-term gradient into the offset and sigma
    heads by construction. Differencing the full total would measure that
    frozen dependency anyway, so each head is checked against the part of
    the loss its gradient actually flows through: offset and sigma against
    the instance + smoothness terms, seeds against the seed term. The
    detachment itself is asserted exactly: backprop of the seed term alone
    must leave offset and sigma heads with zero (or no) gradient.
    """
    t0 = time.monotonic()
    labels = scene.labels if isinstance(scene, InstanceScene) else scene
    if not isinstance(labels, InstanceLabelMap):
        raise TypeError("scene must be an InstanceScene or InstanceLabelMap")
    h, w = labels.shape
    if h > 16 or w > 16:
        raise ValueError(f"grad_check scenes must be at most 16x16, got {h}x{w}")
    num_classes = max([c for c in labels.class_of.values()] + [0]) + 1
    s_channels = loss_cfg.sigma_channels

    gen = torch.Generator().manual_seed(seed)

    def randn(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    offset_raw = (0.7 * randn(2, h, w)).requires_grad_(True)
    sigma_raw = (2.0 + 0.5 * randn(s_channels, h, w)).requires_grad_(True)
    seed_raw = (randn(num_classes, h, w) - 1.0).requires_grad_(True)
    heads = {"offset": offset_raw, "sigma": sigma_raw, "seed": seed_raw}

    def loss_parts():
        out = activate_heads(offset_raw, sigma_raw, seed_raw)
        report = total_loss(out, labels, loss_cfg)
        seed_part = loss_cfg.w_seed * report.seed
        return report.total - seed_part, seed_part

    # which part of the loss each head's gradient flows through
    part_of = {"offset": 0, "sigma": 0, "seed": 1}

    analytic = {}
    for part in (0, 1):
        for tensor in heads.values():
            tensor.grad = None
        loss_parts()[part].backward()
        for name, tensor in heads.items():
            if part_of[name] == part:
                analytic[name] = (tensor.grad.detach().clone()
                                  if tensor.grad is not None
                                  else torch.zeros_like(tensor))

    reports = {}
    with torch.no_grad():
        for name, tensor in heads.items():
            grad = analytic[name]
            part = part_of[name]
            flat = tensor.reshape(-1)
            n_checked = n_skipped = 0
            max_err = 0.0
            worst = None
            failures = []
            for idx in range(flat.numel()):
                orig = flat[idx].item()
                flat[idx] = orig + step
                up = loss_parts()[part].item()
                flat[idx] = orig - step
                down = loss_parts()[part].item()
                flat[idx] = orig
                fd = (up - down) / (2.0 * step)
                a = grad.reshape(-1)[idx].item()
                if abs(a) < GRAD_SKIP_FLOOR and abs(fd) < GRAD_SKIP_FLOOR:
                    n_skipped += 1
                    continue
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                n_checked += 1
                if err > max_err:
                    max_err = err
                    coord = tuple(np.unravel_index(idx, tensor.shape))
                    worst = (coord, a, fd)
                if err > tolerance:
                    coord = tuple(np.unravel_index(idx, tensor.shape))
                    failures.append((coord, a, fd, err))
            reports[name] = HeadGradReport(
                name=name, n_checked=n_checked, n_skipped=n_skipped,
                max_rel_err=max_err, worst_coord=worst, failures=failures,
            )

    for tensor in heads.values():
        tensor.grad = None
    seed_term = total_loss(activate_heads(offset_raw, sigma_raw, seed_raw),
                           labels, loss_cfg).seed
    seed_term.backward()

    def exact_zero(t: torch.Tensor) -> float:
        return 0.0 if t.grad is None else float(t.grad.abs().max())

    report = GradCheckReport(
        heads=reports,
        seed_detach_offset_max=exact_zero(offset_raw),
        seed_detach_sigma_max=exact_zero(sigma_raw),
        tolerance=tolerance,
        step=step,
        seconds=time.monotonic() - t0,
    )
    return report


@dataclass
class AblationCell:
    sigma_mode: str
    center_mode: str
    ap: float
    ap50: float
    ap_small: float
    ap_large: float
    per_class: dict
    spearman: float
    n_val_instances: int
    train_seconds: float

    def as_record(self) -> dict:
        return asdict(self)


@dataclass
class AblationReport:
    cells: list
    extent_split_px: int
    epochs: int
    n_train: int
    n_val: int

    def cell(self, sigma_mode: str, center_mode: str) -> AblationCell:
        for c in self.cells:
            if c.sigma_mode == sigma_mode and c.center_mode == center_mode:
                return c
        raise KeyError(f"no cell ({sigma_mode}, {center_mode})")

    def as_table(self) -> str:
        header = (f"{'sigma':<12}{'center':<12}{'AP':>8}{'AP50':>8}"
                  f"{'AP_small':>10}{'AP_large':>10}{'spearman':>10}")
        rows = [header, "-" * len(header)]
        for c in self.cells:
            rows.append(
                f"{c.sigma_mode:<12}{c.center_mode:<12}{c.ap:>8.3f}{c.ap50:>8.3f}"
                f"{c.ap_small:>10.3f}{c.ap_large:>10.3f}{c.spearman:>10.3f}"
            )
        return "\n".join(rows)

    def as_records(self) -> dict:
        return {
            "extent_split_px": self.extent_split_px,
            "epochs": self.epochs,
            "n_train": self.n_train,
            "n_val": self.n_val,
            "cells": [c.as_record() for c in self.cells],
        }


def evaluate_model(model: Network, loss_cfg: LossConfig, val_scenes: list,
                   batch_size: int = 8, match_spec: MatchSpec = None):
    """Oracle-center AP (overall plus size subsets) and the margin-size
    correlation for a trained model."""
    outputs = forward_scenes(model, val_scenes, batch_size)
    truths = [s.labels for s in val_scenes]
    grid_height = val_scenes[0].image.shape[1]
    fixed_sigma = fixed_sigma_for(loss_cfg, grid_height)
    overall = ap_gt(outputs, truths, spec=match_spec, fixed_sigma=fixed_sigma)
    small = ap_gt(outputs, truths, spec=match_spec, fixed_sigma=fixed_sigma,
                  size_range=(None, EXTENT_SPLIT_PX), size_measure="extent")
    large = ap_gt(outputs, truths, spec=match_spec, fixed_sigma=fixed_sigma,
                  size_range=(EXTENT_SPLIT_PX, None), size_measure="extent")
    if loss_cfg.sigma_mode == "fixed":
        # The sigma head is dead in this mode; margins are a constant.
        margins = None
    else:
        margins = margin_size_correlation(outputs, truths)
    return overall, small, large, margins


def run_ablation(base_cfg: TrainConfig, train_scenes: list, val_scenes: list,
                 grid: tuple = DEFAULT_GRID, out_dir=None, init_seed: int = 0,
                 verbose: bool = False) -> AblationReport:
    """Train one model per (sigma_mode, center_mode) cell with shared
    seeds, data, and budget; report AP_gt per cell plus size subsets."""
    for cell in grid:
        if tuple(cell) not in {tuple(c) for c in DEFAULT_GRID}:
            raise ValueError(f"unknown ablation cell {cell}")
    out_dir = Path(out_dir) if out_dir is not None else None
    cells = []
    for sigma_mode, center_mode in grid:
        loss_cfg = replace(base_cfg.loss, sigma_mode=sigma_mode, center_mode=center_mode)
        cfg = replace(base_cfg, loss=loss_cfg)
        model_cfg = replace(default_model_config(cfg, train_scenes, init_seed=init_seed),
                            sigma_channels=loss_cfg.sigma_channels)
        cell_dir = out_dir / f"{sigma_mode}_{center_mode}" if out_dir else None
        t0 = time.monotonic()
        result = train(cfg, train_scenes, val_scenes, model_cfg=model_cfg,
                       out_dir=cell_dir, verbose=verbose)
        seconds = time.monotonic() - t0
        overall, small, large, margins = evaluate_model(
            result.model, loss_cfg, val_scenes, cfg.batch_size)
        cells.append(AblationCell(
            sigma_mode=sigma_mode,
            center_mode=center_mode,
            ap=overall.ap,
            ap50=overall.ap50,
            ap_small=small.ap,
            ap_large=large.ap,
            per_class={str(k): v for k, v in overall.per_class.items()},
            spearman=margins.spearman if margins is not None else 0.0,
            n_val_instances=overall.n_truths,
            train_seconds=seconds,
        ))
        if verbose:
            print(f"[{sigma_mode}/{center_mode}] ap={overall.ap:.3f} "
                  f"small={small.ap:.3f} large={large.ap:.3f} ({seconds:.0f}s)")
    report = AblationReport(
        cells=cells,
        extent_split_px=EXTENT_SPLIT_PX,
        epochs=base_cfg.epochs,
        n_train=len(train_scenes),
        n_val=len(val_scenes),
    )
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.json", "w") as fh:
            json.dump(report.as_records(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        (out_dir / "ablation.txt").write_text(report.as_table() + "\n")
    return report
