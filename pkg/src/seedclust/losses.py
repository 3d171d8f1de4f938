"""Training losses for seed-driven instance clustering.

The instance term treats each ground-truth instance as a Gaussian in
embedding space whose bandwidth (and optionally center) is pooled from
the instance's own pixels, then scores the resulting soft mask against
the binary truth with the Lovasz hinge. The seed term regresses seed
maps toward the (detached) Gaussian values on foreground and toward zero
on background. The smoothness term pulls per-pixel bandwidths toward
their instance mean so that inference can read sigma at a single pixel.
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import torch

from .geometry import build_coordinate_map, gaussian_phi, margin_of, margin_to_sigma
from .labels import InstanceLabelMap
from .lovasz import lovasz_hinge

SIGMA_MODES = ("fixed", "circular", "elliptical")
CENTER_MODES = ("centroid", "learnable")


@dataclass(frozen=True)
class LossConfig:
    sigma_mode: str = "circular"
    center_mode: str = "learnable"
    # 0.5-crossing radius, in pixels, of the shared Gaussian used when
    # sigma_mode == "fixed". The sigma head is ignored in that mode.
    fixed_margin_px: float = 20.0
    w_instance: float = 1.0
    w_seed: float = 1.0
    w_smooth: float = 10.0

    def __post_init__(self):
        if self.sigma_mode not in SIGMA_MODES:
            raise ValueError(f"sigma_mode must be one of {SIGMA_MODES}, got {self.sigma_mode!r}")
        if self.center_mode not in CENTER_MODES:
            raise ValueError(f"center_mode must be one of {CENTER_MODES}, got {self.center_mode!r}")
        for name in ("w_instance", "w_seed", "w_smooth"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if not (math.isfinite(self.fixed_margin_px) and self.fixed_margin_px > 0):
            raise ValueError(f"fixed_margin_px must be positive, got {self.fixed_margin_px}")

    @property
    def sigma_channels(self) -> int:
        return 2 if self.sigma_mode == "elliptical" else 1


@dataclass
class LossReport:
    total: torch.Tensor
    instance: torch.Tensor
    seed: torch.Tensor
    smooth: torch.Tensor
    weights: tuple
    per_instance: list

    def scalars(self) -> dict:
        return {
            "loss_total": float(self.total.detach()),
            "loss_instance": float(self.instance.detach()),
            "loss_seed": float(self.seed.detach()),
            "loss_smooth": float(self.smooth.detach()),
        }


@dataclass
class _InstanceTerm:
    id: int
    class_id: int
    mask: torch.Tensor    # bool (H, W)
    phi: torch.Tensor     # (H, W)
    center: torch.Tensor  # (2,)
    sigma: torch.Tensor   # (S,), bandwidth actually used in phi
    pixel_count: int


@lru_cache(maxsize=8)
def _coords_cached(h: int, w: int, dtype: torch.dtype) -> torch.Tensor:
    return torch.from_numpy(build_coordinate_map((h, w))).to(dtype)


def torch_coords(shape, dtype=torch.float32) -> torch.Tensor:
    """Coordinate map as a torch tensor, cached per (H, W, dtype)."""
    h, w = shape
    return _coords_cached(int(h), int(w), dtype)


def _check_output(output, labels: InstanceLabelMap, cfg: LossConfig):
    offsets, sigma, seeds = output.offsets, output.sigma, output.seeds
    h, w = labels.shape
    if offsets.ndim != 3 or offsets.shape != (2, h, w):
        raise ValueError(f"offsets must have shape (2, {h}, {w}), got {tuple(offsets.shape)}")
    if sigma.shape[-2:] != (h, w) or seeds.shape[-2:] != (h, w):
        raise ValueError("sigma and seed grids must match the label grid")
    if cfg.sigma_mode != "fixed" and sigma.shape[0] != cfg.sigma_channels:
        raise ValueError(
            f"{cfg.sigma_mode} sigma needs {cfg.sigma_channels} channels, got {sigma.shape[0]}"
        )
    for k, c in labels.class_of.items():
        if c >= seeds.shape[0]:
            raise ValueError(f"instance {k} has class {c} but only {seeds.shape[0]} seed channels")


def _instance_terms(output, labels: InstanceLabelMap, cfg: LossConfig) -> list:
    _check_output(output, labels, cfg)
    offsets = output.offsets
    h, w = labels.shape
    coords = torch_coords((h, w), offsets.dtype)
    emb = coords + offsets
    ids = torch.from_numpy(np.ascontiguousarray(labels.ids)).long()
    if cfg.sigma_mode == "fixed":
        fixed_sigma = margin_to_sigma(cfg.fixed_margin_px / h)
    terms = []
    for k in range(1, labels.num_instances + 1):
        mask = ids == k
        n = int(mask.sum())
        member = emb[:, mask]
        if cfg.center_mode == "learnable":
            center = member.mean(1)
        else:
            center = coords[:, mask].mean(1)
        if cfg.sigma_mode == "fixed":
            sig = torch.full((1,), fixed_sigma, dtype=offsets.dtype)
        else:
            sig = output.sigma[:, mask].mean(1)
        phi = gaussian_phi(emb, center, sig)
        terms.append(_InstanceTerm(k, labels.class_of[k], mask, phi, center, sig, n))
    return terms


def _mask_loss(terms: list, shape) -> tuple:
    if not terms:
        return torch.zeros(()), []
    losses = []
    diags = []
    for t in terms:
        scores = 2.0 * t.phi.reshape(-1) - 1.0
        truth = t.mask.reshape(-1)
        losses.append(lovasz_hinge(scores, truth))
        hard = t.phi.detach() > 0.5
        inter = int((hard & t.mask).sum())
        union = int((hard | t.mask).sum())
        sigma = [float(s) for s in t.sigma.detach()]
        diags.append(
            {
                "id": t.id,
                "class_id": t.class_id,
                "pixel_count": t.pixel_count,
                "center": [float(c) for c in t.center.detach()],
                "sigma": sigma,
                "margin": [margin_of(s) for s in sigma],
                "iou": inter / union if union else 0.0,
            }
        )
    return torch.stack(losses).mean(), diags


def _seed_loss(seeds: torch.Tensor, terms: list) -> torch.Tensor:
    target = torch.zeros_like(seeds)
    for t in terms:
        target[t.class_id][t.mask] = t.phi.detach()[t.mask]
    n = seeds.shape[-2] * seeds.shape[-1]
    return ((seeds - target) ** 2).sum() / n


def _smoothness_loss(sigma_map: torch.Tensor, terms: list) -> torch.Tensor:
    total = torch.zeros(())
    for t in terms:
        member = sigma_map[:, t.mask]
        center = member.mean(1).detach()
        total = total + ((member - center[:, None]) ** 2).sum(0).mean()
    return total


def instance_mask_loss(output, labels: InstanceLabelMap, cfg: LossConfig) -> torch.Tensor:
    """Mean over instances of the Lovasz hinge between the instance's
    Gaussian mask (scored as 2 phi - 1) and its binary truth, evaluated
    over the full image."""
    loss, _ = _mask_loss(_instance_terms(output, labels, cfg), labels.shape)
    return loss


def seed_loss(output, labels: InstanceLabelMap, cfg: LossConfig) -> torch.Tensor:
    """Per-pixel squared error of the seed maps.

    A foreground pixel of instance k with class c regresses seeds[c]
    toward phi_k at that pixel (phi detached: no gradient reaches offsets
    or sigma through this term). Every other channel value regresses
    toward 0. Normalized by pixel count, summed over channels.
    """
    return _seed_loss(output.seeds, _instance_terms(output, labels, cfg))


def smoothness_loss(output, labels: InstanceLabelMap, cfg: LossConfig = None) -> torch.Tensor:
    """Sum over instances of the mean squared deviation of member sigmas
    from their (detached) instance mean."""
    cfg = cfg or LossConfig()
    if cfg.sigma_mode == "fixed":
        return torch.zeros(())
    terms = _instance_terms(output, labels, cfg)
    return _smoothness_loss(output.sigma, terms)


def total_loss(output, labels: InstanceLabelMap, cfg: LossConfig) -> LossReport:
    """Weighted sum of instance, seed and smoothness terms.

    In fixed sigma mode the smoothness term is reported as 0 and the
    sigma head receives no gradient from any term.
    """
    terms = _instance_terms(output, labels, cfg)
    inst, diags = _mask_loss(terms, labels.shape)
    seed = _seed_loss(output.seeds, terms)
    if cfg.sigma_mode == "fixed":
        smooth = torch.zeros(())
    else:
        smooth = _smoothness_loss(output.sigma, terms)
    total = cfg.w_instance * inst + cfg.w_seed * seed + cfg.w_smooth * smooth
    return LossReport(
        total=total,
        instance=inst,
        seed=seed,
        smooth=smooth,
        weights=(cfg.w_instance, cfg.w_seed, cfg.w_smooth),
        per_instance=diags,
    )


def regression_baseline_loss(output, labels: InstanceLabelMap) -> torch.Tensor:
    """Direct offset regression toward the instance centroid:
    sum over foreground pixels of ||o_i - (C_k - x_i)||."""
    offsets = output.offsets
    h, w = labels.shape
    coords = torch_coords((h, w), offsets.dtype)
    ids = torch.from_numpy(np.ascontiguousarray(labels.ids)).long()
    total = torch.zeros(())
    for k in range(1, labels.num_instances + 1):
        mask = ids == k
        centroid = coords[:, mask].mean(1)
        target = centroid[:, None] - coords[:, mask]
        diff = offsets[:, mask] - target
        total = total + (diff ** 2).sum(0).sqrt().sum()
    return total


def hinge_baseline_loss(output, labels: InstanceLabelMap, delta: float) -> torch.Tensor:
    """Fixed-margin pull toward the instance centroid:
    sum over instances and member pixels of max(||e_i - C_k|| - delta, 0)."""
    if not (math.isfinite(delta) and delta > 0):
        raise ValueError(f"delta must be positive, got {delta}")
    offsets = output.offsets
    h, w = labels.shape
    coords = torch_coords((h, w), offsets.dtype)
    emb = coords + offsets
    ids = torch.from_numpy(np.ascontiguousarray(labels.ids)).long()
    total = torch.zeros(())
    for k in range(1, labels.num_instances + 1):
        mask = ids == k
        centroid = coords[:, mask].mean(1)
        dist = ((emb[:, mask] - centroid[:, None]) ** 2).sum(0).sqrt()
        total = total + torch.relu(dist - delta).sum()
    return total
