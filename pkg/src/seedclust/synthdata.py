"""Deterministic synthetic scenes: flat-colored disks and bars.

Scenes mix small objects with at most one frame-scale giant (the size
spread that breaks a fixed clustering margin), occasionally drop two
small objects right next to each other (the merge stressor for
distance-based baselines), and render bars with up to 6:1 elongation
(the win condition for elliptical bandwidths). Scene content is a pure
function of (spec, index): every draw comes from numpy's seeded
generator keyed on both.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .fields import load_pixel_fields, save_pixel_fields
from .labels import InstanceLabelMap, relabel_contiguous

MANIFEST_FORMAT = "seedclust-dataset"
MANIFEST_VERSION = 1

DISK_CLASS = 0
BAR_CLASS = 1


@dataclass(frozen=True)
class SceneSpec:
    shape: tuple = (64, 64)
    num_classes: int = 2
    instances_range: tuple = (2, 6)
    # Object scale: radius for disks, half-length for bars, in pixels.
    # The regimes straddle the 20 px fixed clustering margin from both
    # sides so a single bandwidth cannot serve every object. The large
    # range deliberately exceeds the grid's half-side: those objects clip
    # at the border, the way big objects leave any crop's field of view.
    small_radius: tuple = (6.0, 20.0)
    large_radius: tuple = (35.0, 55.0)
    # Chance a scene hosts a large object. Never more than one: a frame
    # this size cannot show two frame-scale objects without one occluding
    # the other into fragments.
    large_prob: float = 0.5
    # Bars: half-length / half-width ratio; half-width floored at 1.5 px.
    elongation: tuple = (2.0, 6.0)
    # Chance that a small object spawns an adjacent small twin.
    pair_prob: float = 0.2
    noise_sigma: float = 0.05
    seed: int = 0

    def __post_init__(self):
        h, w = self.shape
        if h < 8 or w < 8:
            raise ValueError(f"image too small: {self.shape}")
        if self.num_classes not in (1, 2):
            raise ValueError(f"num_classes must be 1 or 2, got {self.num_classes}")
        lo, hi = self.instances_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad instances_range {self.instances_range}")
        if hi < 1:
            raise ValueError("spec admits no instances at all")
        for name in ("small_radius", "large_radius", "elongation"):
            a, b = getattr(self, name)
            if not (0 < a <= b):
                raise ValueError(f"bad {name} range ({a}, {b})")
        if self.large_radius[1] > min(h, w):
            raise ValueError(
                f"largest object (radius {self.large_radius[1]}) dwarfs the {self.shape} grid"
            )
        if not (0.0 <= self.large_prob <= 1.0 and 0.0 <= self.pair_prob <= 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")


@dataclass
class InstanceScene:
    image: np.ndarray  # float32 (3, H, W), quantized to uint8 steps
    labels: InstanceLabelMap
    index: int = 0

    @property
    def shape(self) -> tuple:
        return self.image.shape[1:]


def _disk_mask(h, w, cy, cx, radius) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    return (ys - cy) ** 2 + (xs - cx) ** 2 <= radius ** 2


def _bar_mask(h, w, cy, cx, half_len, half_width, theta) -> np.ndarray:
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs - cx, ys - cy
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (np.abs(u) <= half_len) & (np.abs(v) <= half_width)


def _draw_object(rng, spec: SceneSpec, tier: str):
    """One object's geometry draw: (shape_kind, scale, params)."""
    kind = int(rng.integers(0, 2))
    lo, hi = spec.large_radius if tier == "large" else spec.small_radius
    scale = float(rng.uniform(lo, hi))
    theta = float(rng.uniform(0.0, np.pi))
    elong = float(rng.uniform(*spec.elongation))
    return kind, scale, theta, elong


def _support(kind, scale, elong, theta, angle) -> float:
    """Half-extent of the object along `angle` from its center."""
    if kind == 0:
        return scale
    half_width = max(scale / elong, 1.5)
    rel = angle - theta
    return scale * abs(np.cos(rel)) + half_width * abs(np.sin(rel))


def _paint(rng, spec: SceneSpec, objects: list):
    """objects: list of (kind, scale, theta, elong, cy, cx)."""
    h, w = spec.shape
    raw_ids = np.zeros((h, w), dtype=np.int32)
    raw_class = {}
    canvas = np.empty((3, h, w), dtype=np.float64)
    canvas[:] = rng.uniform(0.2, 0.8, size=3)[:, None, None]
    for i, (kind, scale, theta, elong, cy, cx) in enumerate(objects, start=1):
        if kind == 0:
            mask = _disk_mask(h, w, cy, cx, scale)
        else:
            half_width = max(scale / elong, 1.5)
            mask = _bar_mask(h, w, cy, cx, scale, half_width, theta)
        color = rng.uniform(0.05, 0.95, size=3)
        if not mask.any():
            continue
        raw_ids[mask] = i
        raw_class[i] = kind % spec.num_classes
        canvas[:, mask] = color[:, None]
    present = set(np.unique(raw_ids)) - {0}
    labels = relabel_contiguous(raw_ids, {k: raw_class[k] for k in raw_class if k in present})
    if spec.noise_sigma > 0:
        canvas = canvas + rng.normal(0.0, spec.noise_sigma, size=canvas.shape)
    quantized = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    return InstanceScene(image=quantized.astype(np.float32) / 255.0, labels=labels)


def generate(spec: SceneSpec, index: int) -> InstanceScene:
    """Render scene `index`. Pure in (spec, index); z-order occlusion with
    fully hidden instances dropped and ids renumbered contiguously."""
    if index < 0:
        raise ValueError(f"index must be >= 0, got {index}")
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.shape
    n = int(rng.integers(spec.instances_range[0], spec.instances_range[1] + 1))
    objects = []
    pad = 2.0
    giant_first = n > 0 and spec.large_prob > 0 and rng.random() < spec.large_prob
    i = 0
    while i < n:
        tier = "large" if (i == 0 and giant_first) else "small"
        kind, scale, theta, elong = _draw_object(rng, spec, tier)
        cy = float(rng.uniform(pad, h - pad))
        cx = float(rng.uniform(pad, w - pad))
        objects.append((kind, scale, theta, elong, cy, cx))
        i += 1
        small = scale <= spec.small_radius[1]
        if small and i < n and rng.random() < spec.pair_prob:
            kind2, scale2, theta2, elong2 = _draw_object(rng, spec, "small")
            gap = float(rng.uniform(1.0, 3.0))
            angle = float(rng.uniform(0.0, 2 * np.pi))
            # support radii keep the surface gap near `gap` for any shapes
            dist = _support(kind, scale, elong, theta, angle) \
                + _support(kind2, scale2, elong2, theta2, angle) + gap
            cy2 = min(max(cy + dist * np.sin(angle), pad), h - pad)
            cx2 = min(max(cx + dist * np.cos(angle), pad), w - pad)
            objects.append((kind2, scale2, theta2, elong2, cy2, cx2))
            i += 1
    scene = _paint(rng, spec, objects)
    scene.index = index
    return scene


def scene_checksum(scene: InstanceScene) -> str:
    img_u8 = np.rint(scene.image * 255.0).astype(np.uint8)
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(img_u8).tobytes())
    digest.update(np.ascontiguousarray(scene.labels.ids).tobytes())
    digest.update(json.dumps(sorted(scene.labels.class_of.items())).encode())
    return digest.hexdigest()


def split_of(index: int) -> str:
    return "val" if index % 5 == 4 else "train"


def dataset_manifest(spec: SceneSpec, n: int) -> dict:
    """Manifest with scene indices, 80/20 train/val split tags, the spec
    echo, and per-scene checksums for round-trip verification."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    scenes = []
    for i in range(n):
        scenes.append({
            "index": i,
            "split": split_of(i),
            "checksum": scene_checksum(generate(spec, i)),
        })
    return {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "spec": asdict(spec),
        "n": n,
        "scenes": scenes,
    }


def write_manifest(path, manifest: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def spec_from_manifest(manifest: dict) -> SceneSpec:
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError("not a dataset manifest")
    raw = dict(manifest["spec"])
    for key in ("shape", "instances_range", "small_radius", "large_radius", "elongation"):
        raw[key] = tuple(raw[key])
    return SceneSpec(**raw)


def load_manifest(path) -> dict:
    with open(path) as fh:
        manifest = json.load(fh)
    spec_from_manifest(manifest)
    return manifest


def scenes_from_manifest(manifest: dict, split: str = None,
                         verify: bool = False) -> list:
    """Regenerate the scenes listed in a manifest, optionally filtered by
    split tag and verified against the stored checksums."""
    spec = spec_from_manifest(manifest)
    out = []
    for entry in manifest["scenes"]:
        if split is not None and entry["split"] != split:
            continue
        scene = generate(spec, entry["index"])
        if verify and scene_checksum(scene) != entry["checksum"]:
            raise ValueError(f"scene {entry['index']} does not match its manifest checksum")
        out.append(scene)
    return out


def save_scene(directory, scene: InstanceScene) -> Path:
    """Store a scene as a lossless PNG plus a label field directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    img_u8 = np.rint(scene.image * 255.0).astype(np.uint8)
    Image.fromarray(np.moveaxis(img_u8, 0, -1)).save(directory / "image.png")
    save_pixel_fields(directory / "fields", {"labels": scene.labels.ids})
    meta = {
        "index": scene.index,
        "class_of": {str(k): v for k, v in scene.labels.class_of.items()},
    }
    with open(directory / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_scene(directory) -> InstanceScene:
    directory = Path(directory)
    img_u8 = np.asarray(Image.open(directory / "image.png"))
    image = np.moveaxis(img_u8, -1, 0).astype(np.float32) / 255.0
    ids = load_pixel_fields(directory / "fields")["labels"]
    with open(directory / "meta.json") as fh:
        meta = json.load(fh)
    class_of = {int(k): int(v) for k, v in meta["class_of"].items()}
    return InstanceScene(image=image, labels=InstanceLabelMap(ids, class_of),
                         index=int(meta["index"]))
