"""Seed-driven sequential clustering of spatial embeddings.

Inference runs in float64 numpy. Per class channel, pixels whose seed
value exceeds the foreground threshold are candidates. The highest
remaining seed is sampled as a center: its embedding becomes the cluster
center, its sigma the cluster bandwidth, and every unmasked candidate
with phi > 0.5 joins the cluster. Sampled and assigned pixels are masked
before the next iteration, so the loop always terminates. Clusters
smaller than min_pixels are discarded but their pixels stay masked.
"""

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import load_pixel_fields, save_pixel_fields
from .geometry import build_coordinate_map
from .labels import InstanceLabelMap

PHI_THRESHOLD = 0.5


@dataclass(frozen=True)
class ClusterConfig:
    fg_threshold: float = 0.5
    seed_threshold: float = 0.5
    min_pixels: int = 16
    phi_threshold: float = PHI_THRESHOLD

    def __post_init__(self):
        for name in ("fg_threshold", "seed_threshold", "phi_threshold"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name} must lie in (0, 1), got {v}")
        if self.min_pixels < 1:
            raise ValueError(f"min_pixels must be >= 1, got {self.min_pixels}")


@dataclass
class ClusterInstance:
    id: int
    class_id: int
    confidence: float
    center: np.ndarray  # (2,) normalized embedding-space center
    sigma: np.ndarray   # (S,) bandwidth used for assignment
    mask: np.ndarray    # bool (H, W), before overlap flattening
    pixel_count: int
    # For oracle clustering: the ground-truth instance id this cluster was
    # built from. None for seed-driven clusters.
    source_id: int = None


@dataclass
class ClusterResult:
    instance_map: np.ndarray        # int32 (H, W), 0 background
    instances: list = field(default_factory=list)

    def __post_init__(self):
        self.instance_map = np.asarray(self.instance_map, dtype=np.int32)


def _as_float64_fields(output):
    """Pull (embeddings, sigma, seeds) float64 arrays out of a ModelOutput
    or a plain dict of numpy arrays with keys offsets/sigma/seeds."""
    if isinstance(output, dict):
        offsets = np.asarray(output["offsets"], dtype=np.float64)
        sigma = np.asarray(output["sigma"], dtype=np.float64)
        seeds = np.asarray(output["seeds"], dtype=np.float64)
    else:
        if output.batched:
            raise ValueError("clustering expects a single-image output, got a batched one")
        offsets = output.offsets.detach().cpu().numpy().astype(np.float64)
        sigma = output.sigma.detach().cpu().numpy().astype(np.float64)
        seeds = output.seeds.detach().cpu().numpy().astype(np.float64)
    if offsets.ndim != 3 or offsets.shape[0] != 2:
        raise ValueError(f"offsets must have shape (2, H, W), got {offsets.shape}")
    hw = offsets.shape[1:]
    if sigma.shape[1:] != hw or seeds.shape[1:] != hw:
        raise ValueError("sigma and seeds must share the offset grid")
    if sigma.shape[0] not in (1, 2):
        raise ValueError(f"sigma must have 1 or 2 channels, got {sigma.shape[0]}")
    coords = build_coordinate_map(hw)
    return coords + offsets, sigma, seeds


def _phi_field(embeddings: np.ndarray, center: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    d2 = (embeddings - center[:, None, None]) ** 2 / (2.0 * sigma[:, None, None] ** 2)
    return np.exp(-d2.sum(0))


def cluster_fields(embeddings: np.ndarray, sigma: np.ndarray, seeds: np.ndarray,
                   config: ClusterConfig = None) -> ClusterResult:
    """Sequential clustering over explicit float64 fields.

    embeddings (2, H, W), sigma (S, H, W), seeds (C, H, W). Deterministic:
    seed argmax ties break in row-major order, classes are processed in
    channel order, and ids are assigned in creation order starting at 1.
    """
    cfg = config or ClusterConfig()
    embeddings = np.asarray(embeddings, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    seeds = np.asarray(seeds, dtype=np.float64)
    h, w = embeddings.shape[1:]
    instances = []
    for class_id in range(seeds.shape[0]):
        seed_map = seeds[class_id]
        available = seed_map > cfg.fg_threshold
        while available.any():
            flat = np.where(available, seed_map, -np.inf).argmax()
            r, c = divmod(int(flat), w)
            seed_value = float(seed_map[r, c])
            if not seed_value > cfg.seed_threshold:
                break
            center = embeddings[:, r, c].copy()
            sig = sigma[:, r, c].copy()
            if not np.all(np.isfinite(sig)) or np.any(sig <= 0):
                warnings.warn(
                    f"unusable sigma {sig} at seed ({r}, {c}), class {class_id}; "
                    "pixel masked and skipped",
                    RuntimeWarning,
                    stacklevel=2,
                )
                available[r, c] = False
                continue
            phi = _phi_field(embeddings, center, sig)
            member = available & (phi > cfg.phi_threshold)
            member[r, c] = True
            available &= ~member
            count = int(member.sum())
            if count < cfg.min_pixels:
                continue
            instances.append(ClusterInstance(
                id=len(instances) + 1,
                class_id=class_id,
                confidence=seed_value,
                center=center,
                sigma=sig,
                mask=member,
                pixel_count=count,
            ))
    return ClusterResult(instance_map=flatten_instances(instances, (h, w)),
                         instances=instances)


def flatten_instances(instances: list, shape) -> np.ndarray:
    """Resolve overlapping cluster masks into a single id map.

    A contested pixel goes to the higher confidence; exact confidence ties
    go to the lower id.
    """
    h, w = shape
    out = np.zeros((h, w), dtype=np.int32)
    best = np.full((h, w), -np.inf)
    for inst in instances:
        take = inst.mask & (inst.confidence > best)
        out[take] = inst.id
        best[take] = inst.confidence
    return out


def cluster(output, config: ClusterConfig = None) -> ClusterResult:
    """Cluster a model output (seed-driven, no ground truth)."""
    embeddings, sigma, seeds = _as_float64_fields(output)
    return cluster_fields(embeddings, sigma, seeds, config)


def cluster_with_oracle_centers(output, labels: InstanceLabelMap,
                                fixed_sigma: float = None) -> ClusterResult:
    """Clustering quality upper bound that sidesteps the seed maps.

    For every ground-truth instance the center is the mean embedding over
    the instance's true pixels and the bandwidth is the mean sigma over
    those pixels (or `fixed_sigma` for every instance when given). All
    pixels with phi > 0.5 are assigned; contested pixels go to the higher
    phi. Classes come from the truth and every confidence is 1.0. Clusters
    that end up empty are dropped; ids are renumbered contiguously and
    source_id records the originating truth id.
    """
    embeddings, sigma, _ = _as_float64_fields(output)
    h, w = labels.shape
    if embeddings.shape[1:] != (h, w):
        raise ValueError(f"output grid {embeddings.shape[1:]} != label grid {(h, w)}")
    centers, sigmas, source_ids = [], [], []
    for k in range(1, labels.num_instances + 1):
        mask = labels.ids == k
        center = embeddings[:, mask].mean(axis=1)
        if fixed_sigma is not None:
            if not (math.isfinite(fixed_sigma) and fixed_sigma > 0):
                raise ValueError(f"fixed_sigma must be positive, got {fixed_sigma}")
            sig = np.full(sigma.shape[0], float(fixed_sigma))
        else:
            sig = sigma[:, mask].mean(axis=1)
        centers.append(center)
        sigmas.append(sig)
        source_ids.append(k)
    best_phi = np.full((h, w), PHI_THRESHOLD)
    winner = np.zeros((h, w), dtype=np.int64)
    phis = []
    for k, center, sig in zip(source_ids, centers, sigmas):
        phi = _phi_field(embeddings, center, sig)
        phis.append(phi)
        better = phi > best_phi
        winner[better] = k
        best_phi[better] = phi[better]
    instances = []
    instance_map = np.zeros((h, w), dtype=np.int32)
    for k, center, sig in zip(source_ids, centers, sigmas):
        mask = winner == k
        count = int(mask.sum())
        if count == 0:
            continue
        new_id = len(instances) + 1
        instances.append(ClusterInstance(
            id=new_id,
            class_id=labels.class_of[k],
            confidence=1.0,
            center=center,
            sigma=sig,
            mask=mask,
            pixel_count=count,
            source_id=k,
        ))
        instance_map[mask] = new_id
    return ClusterResult(instance_map=instance_map, instances=instances)


def save_cluster_result(directory, result: ClusterResult) -> Path:
    """Export a ClusterResult: instance map and per-instance masks as a
    field directory plus an instances.json with the scalar attributes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    h, w = result.instance_map.shape
    masks = np.zeros((len(result.instances), h, w), dtype=np.uint8)
    records = []
    for i, inst in enumerate(result.instances):
        masks[i] = inst.mask.astype(np.uint8)
        records.append({
            "id": inst.id,
            "class_id": inst.class_id,
            "confidence": float(inst.confidence),
            "center": [float(v) for v in inst.center],
            "sigma": [float(v) for v in inst.sigma],
            "pixel_count": inst.pixel_count,
            "source_id": inst.source_id,
        })
    save_pixel_fields(directory / "fields",
                      {"instance_map": result.instance_map, "masks": masks})
    with open(directory / "instances.json", "w") as fh:
        json.dump(records, fh, indent=2)
        fh.write("\n")
    return directory


def load_cluster_result(directory) -> ClusterResult:
    directory = Path(directory)
    data = load_pixel_fields(directory / "fields")
    with open(directory / "instances.json") as fh:
        records = json.load(fh)
    masks = data["masks"]
    if masks.shape[0] != len(records):
        raise ValueError(
            f"{directory}: {masks.shape[0]} masks but {len(records)} instance records"
        )
    instances = []
    for i, rec in enumerate(records):
        instances.append(ClusterInstance(
            id=int(rec["id"]),
            class_id=int(rec["class_id"]),
            confidence=float(rec["confidence"]),
            center=np.asarray(rec["center"], dtype=np.float64),
            sigma=np.asarray(rec["sigma"], dtype=np.float64),
            mask=masks[i].astype(bool),
            pixel_count=int(rec["pixel_count"]),
            source_id=rec["source_id"],
        ))
    return ClusterResult(instance_map=data["instance_map"], instances=instances)


def nearest_centroid_assign(embeddings: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Assign every pixel to the nearest center (1-based ids, ties to the
    lowest index). Baseline partitioner: no background."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 2:
        raise ValueError(f"centers must have shape (M, 2), got {centers.shape}")
    if centers.shape[0] == 0:
        raise ValueError("need at least one center")
    d2 = ((embeddings[None] - centers[:, :, None, None]) ** 2).sum(1)
    return (d2.argmin(axis=0) + 1).astype(np.int32)


def fixed_margin_assign(embeddings: np.ndarray, centers: np.ndarray,
                        delta: float) -> np.ndarray:
    """Assign pixels within distance delta of a center (strict <) to that
    center; pixels within several margins go to the closest (ties to the
    lowest index); everything else is background 0."""
    if not (math.isfinite(delta) and delta > 0):
        raise ValueError(f"delta must be positive, got {delta}")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    if centers.ndim != 2 or centers.shape[1] != 2:
        raise ValueError(f"centers must have shape (M, 2), got {centers.shape}")
    if centers.shape[0] == 0:
        raise ValueError("need at least one center")
    dist = np.sqrt(((embeddings[None] - centers[:, :, None, None]) ** 2).sum(1))
    nearest = dist.argmin(axis=0)
    nearest_dist = np.take_along_axis(dist, nearest[None], axis=0)[0]
    return np.where(nearest_dist < delta, nearest + 1, 0).astype(np.int32)
