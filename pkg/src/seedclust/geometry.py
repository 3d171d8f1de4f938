"""Grid geometry and the Gaussian assignment function.

Pixel coordinates are expressed in normalized units where one pixel step
equals 1/H for an image of height H. A pixel at row r, column c therefore
sits at (x, y) = (c/H, r/H), so y spans [0, 1] and x spans [0, W/H].
Offsets limited to [-1, 1] can move an embedding by at most H pixels.
"""

import math
from dataclasses import dataclass

import numpy as np
import torch

# Radius at which a Gaussian with bandwidth sigma crosses 0.5:
# exp(-m^2 / (2 sigma^2)) = 0.5  =>  m = sigma * sqrt(2 ln 2).
SQRT_2LN2 = math.sqrt(2.0 * math.log(2.0))

# Raw sigma-head outputs are clamped to this symmetric range before the
# exponential, bounding sigma to [exp(-6)/sqrt(2), exp(6)/sqrt(2)].
RAW_SIGMA_CLAMP = 12.0


@dataclass(frozen=True)
class GridShape:
    height: int
    width: int

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError(
                f"grid dimensions must be positive, got {self.height}x{self.width}"
            )

    @property
    def hw(self) -> tuple[int, int]:
        return (self.height, self.width)


def as_grid_shape(shape) -> GridShape:
    if isinstance(shape, GridShape):
        return shape
    h, w = shape
    return GridShape(int(h), int(w))


def build_coordinate_map(shape, dtype=np.float64) -> np.ndarray:
    """Per-pixel normalized coordinates, shape (2, H, W).

    Channel 0 is x = col/H, channel 1 is y = row/H. Values are exact
    float divisions, so coords[:, r, c] == (c/H, r/H) bit for bit.
    """
    h, w = as_grid_shape(shape).hw
    coords = np.empty((2, h, w), dtype=dtype)
    coords[0] = (np.arange(w, dtype=dtype) / h)[None, :]
    coords[1] = (np.arange(h, dtype=dtype) / h)[:, None]
    return coords


def embed(coords, offsets):
    """Spatial embedding e = x + o, elementwise over (2, ...) arrays."""
    if tuple(coords.shape) != tuple(offsets.shape):
        raise ValueError(
            f"coords shape {tuple(coords.shape)} != offsets shape {tuple(offsets.shape)}"
        )
    if coords.shape[0] != 2:
        raise ValueError(f"leading dimension must be 2, got {coords.shape[0]}")
    return coords + offsets


def _is_torch(*xs) -> bool:
    return any(isinstance(x, torch.Tensor) for x in xs)


def _check_sigma_positive(sigma) -> None:
    if isinstance(sigma, torch.Tensor):
        bad = not bool(torch.all(sigma.detach() > 0))
    else:
        bad = not bool(np.all(np.asarray(sigma) > 0))
    if bad:
        raise ValueError("sigma must be strictly positive")


def gaussian_phi(embeddings, center, sigma):
    """Soft assignment of embeddings to an instance: phi in (0, 1].

    Circular (scalar or 1-channel sigma):
        phi = exp(-||e - C||^2 / (2 sigma^2))
    Elliptical (2-channel sigma): independent x and y bandwidths,
        phi = exp(-(e_x - C_x)^2 / (2 sigma_x^2) - (e_y - C_y)^2 / (2 sigma_y^2)).

    `embeddings` has shape (2, ...); `center` has shape (2,); `sigma` is a
    scalar or has shape (1,) or (2,). Output shape is embeddings.shape[1:].
    phi == 1 exactly where e == C. Differentiable in every argument when
    given torch tensors.
    """
    _check_sigma_positive(sigma)
    if _is_torch(embeddings, center, sigma):
        xp = torch
        embeddings = torch.as_tensor(embeddings)
        center = torch.as_tensor(center, dtype=embeddings.dtype)
        sigma = torch.as_tensor(sigma, dtype=embeddings.dtype)
    else:
        xp = np
        embeddings = np.asarray(embeddings)
        center = np.asarray(center)
        sigma = np.asarray(sigma)
    if embeddings.shape[0] != 2:
        raise ValueError(f"embeddings leading dimension must be 2, got {embeddings.shape[0]}")
    trailing = embeddings.ndim - 1
    center_b = center.reshape((2,) + (1,) * trailing)
    if sigma.ndim == 1:
        if sigma.shape[0] not in (1, 2):
            raise ValueError(f"sigma must have 1 or 2 channels, got {sigma.shape[0]}")
        sigma_b = sigma.reshape((sigma.shape[0],) + (1,) * trailing)
    else:
        sigma_b = sigma
    d2 = (embeddings - center_b) ** 2 / (2.0 * sigma_b ** 2)
    return xp.exp(-d2.sum(0))


def margin_of(sigma):
    """Radius where phi crosses 0.5: sqrt(-2 sigma^2 ln 0.5) = sigma * sqrt(2 ln 2)."""
    _check_sigma_positive(sigma)
    return sigma * SQRT_2LN2


def margin_to_sigma(margin):
    """Inverse of margin_of: the bandwidth whose 0.5-crossing sits at `margin`."""
    if isinstance(margin, torch.Tensor):
        ok = bool(torch.all(margin.detach() > 0))
    else:
        ok = bool(np.all(np.asarray(margin) > 0))
    if not ok:
        raise ValueError("margin must be strictly positive")
    return margin / SQRT_2LN2


def sigma_from_raw(raw):
    """Map a raw sigma-head output to a bandwidth.

    The head predicts raw = ln(1 / (2 sigma^2)), so
    sigma = exp(-raw / 2) / sqrt(2). Raw values are clamped to
    [-RAW_SIGMA_CLAMP, RAW_SIGMA_CLAMP] first; the map is monotone
    decreasing and strictly positive.
    """
    inv_sqrt2 = 1.0 / math.sqrt(2.0)
    if isinstance(raw, torch.Tensor):
        raw = raw.clamp(-RAW_SIGMA_CLAMP, RAW_SIGMA_CLAMP)
        return torch.exp(-0.5 * raw) * inv_sqrt2
    raw = np.clip(raw, -RAW_SIGMA_CLAMP, RAW_SIGMA_CLAMP)
    return np.exp(-0.5 * raw) * inv_sqrt2


def sigma_to_raw(sigma):
    """Inverse of sigma_from_raw (ignoring the clamp): raw = -ln(2 sigma^2)."""
    _check_sigma_positive(sigma)
    if isinstance(sigma, torch.Tensor):
        return -torch.log(2.0 * sigma ** 2)
    return -np.log(2.0 * np.asarray(sigma) ** 2)
