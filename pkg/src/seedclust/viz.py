"""Static figure dumps: offset color wheels, bandwidth heat maps,
seed maps, instance overlays, and the margin-vs-size scatter."""

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import numpy as np
from PIL import Image
from matplotlib import colormaps
from matplotlib import pyplot as plt
from matplotlib.colors import hsv_to_rgb

from .geometry import SQRT_2LN2


def save_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(rgb).save(path)


def offset_to_rgb(offsets: np.ndarray) -> np.ndarray:
    """Hue encodes the offset angle, saturation its magnitude (normalized
    to the field's maximum), value fixed at 1. Returns uint8 (H, W, 3)."""
    offsets = np.asarray(offsets, dtype=np.float64)
    if offsets.ndim != 3 or offsets.shape[0] != 2:
        raise ValueError(f"offsets must have shape (2, H, W), got {offsets.shape}")
    angle = np.arctan2(offsets[1], offsets[0])
    magnitude = np.hypot(offsets[0], offsets[1])
    peak = magnitude.max()
    hsv = np.stack([
        (angle + np.pi) / (2 * np.pi),
        magnitude / peak if peak > 0 else magnitude,
        np.ones_like(angle),
    ], axis=-1)
    return (hsv_to_rgb(hsv) * 255).round().astype(np.uint8)


def heatmap(values: np.ndarray, cmap: str = "viridis",
            vmin: float = None, vmax: float = None) -> np.ndarray:
    """Scalar field to uint8 RGB via a matplotlib colormap."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"heatmap expects a 2-D field, got shape {values.shape}")
    lo = values.min() if vmin is None else vmin
    hi = values.max() if vmax is None else vmax
    span = hi - lo
    norm = (values - lo) / span if span > 0 else np.zeros_like(values)
    rgba = colormaps[cmap](np.clip(norm, 0.0, 1.0))
    return (rgba[..., :3] * 255).round().astype(np.uint8)


def instance_overlay(image: np.ndarray, instance_map: np.ndarray,
                     alpha: float = 0.55) -> np.ndarray:
    """Blend distinct instance colors over the image. image is (3, H, W)
    float in [0, 1]; returns uint8 (H, W, 3)."""
    base = np.moveaxis(np.asarray(image, dtype=np.float64), 0, -1)
    out = base.copy()
    ids = np.unique(instance_map)
    ids = ids[ids != 0]
    cmap = colormaps["tab20"]
    for i, k in enumerate(ids):
        color = np.array(cmap(i % 20)[:3])
        mask = instance_map == k
        out[mask] = (1 - alpha) * base[mask] + alpha * color
    return (np.clip(out, 0, 1) * 255).round().astype(np.uint8)


def dump_field_images(out_dir, offsets: np.ndarray, sigma: np.ndarray,
                      seeds: np.ndarray, grid_height: int) -> list:
    """Write the standard field figures: one offset color map, one sigma
    heat map, one margin heat map (pixels), and one map per seed channel.
    Returns the written paths (exactly 3 + num_classes of them)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    def put(name, rgb):
        path = out_dir / name
        save_png(path, rgb)
        paths.append(path)

    sigma = np.asarray(sigma, dtype=np.float64)
    # One scalar bandwidth per pixel: geometric mean across channels.
    sigma_scalar = np.exp(np.log(sigma).mean(axis=0))
    put("offsets.png", offset_to_rgb(offsets))
    put("sigma.png", heatmap(sigma_scalar))
    put("margin.png", heatmap(sigma_scalar * SQRT_2LN2 * grid_height))
    for c in range(np.asarray(seeds).shape[0]):
        put(f"seed_class{c}.png", heatmap(np.asarray(seeds)[c], vmin=0.0, vmax=1.0))
    return paths


def save_margin_size_scatter(path, pairs: list, title: str = None) -> None:
    """Scatter of learned margin (pixels) against instance size (pixels),
    one dot per ground-truth instance."""
    sizes = [p[0] for p in pairs]
    margins = [p[1] for p in pairs]
    fig, ax = plt.subplots(figsize=(5, 4), dpi=120)
    ax.scatter(sizes, margins, s=12, alpha=0.6, edgecolors="none")
    ax.set_xlabel("instance size (pixels)")
    ax.set_ylabel("margin (pixels)")
    ax.set_xscale("log")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
