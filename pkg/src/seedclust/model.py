"""Shared-encoder, two-decoder convolutional network.

One decoder emits geometry (2 offset channels plus the sigma channels),
the other emits one seed channel per semantic class. Heads are
zero-initialized so that at step 0 the offsets vanish (embeddings equal
the coordinate map), sigma is spatially constant at a configured margin,
and seeds sit at a small constant probability.
"""

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .geometry import margin_to_sigma, sigma_from_raw, sigma_to_raw

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 2
    sigma_channels: int = 1
    in_channels: int = 3
    widths: tuple = (12, 24, 36, 48)
    groupnorm_groups: int = 4
    init_seed: int = 0
    # Margin (pixels, relative to init_grid_height) encoded into the sigma
    # head bias so a fresh network starts at a known bandwidth.
    init_margin_px: float = 10.0
    init_grid_height: int = 64
    seed_bias: float = -2.0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.sigma_channels not in (1, 2):
            raise ValueError(f"sigma_channels must be 1 or 2, got {self.sigma_channels}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("widths needs at least a stem and one downsampling stage")
        for w in self.widths:
            if w < 1 or w % self.groupnorm_groups:
                raise ValueError(f"width {w} must be a positive multiple of {self.groupnorm_groups}")
        if self.init_margin_px <= 0 or self.init_grid_height < 1:
            raise ValueError("init margin and grid height must be positive")

    @property
    def downsample(self) -> int:
        return 2 ** (len(self.widths) - 1)


class _Block(nn.Module):
    def __init__(self, cin: int, cout: int, groups: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(groups, cout),
            nn.ReLU(inplace=True),
            nn.Conv2d(cout, cout, 3, padding=1),
            nn.GroupNorm(groups, cout),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, widths: tuple, out_channels: int, groups: int):
        super().__init__()
        ups, blocks = [], []
        for i in range(len(widths) - 1, 0, -1):
            ups.append(nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2))
            blocks.append(_Block(2 * widths[i - 1], widths[i - 1], groups))
        self.ups = nn.ModuleList(ups)
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Conv2d(widths[0], out_channels, 1)

    def forward(self, feats: list):
        x = feats[-1]
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            skip = feats[-2 - i]
            x = block(torch.cat([up(x), skip], dim=1))
        return self.head(x)


@dataclass
class ModelOutput:
    """Raw head outputs and their activated forms.

    Activated fields: offsets = tanh(offset_raw) in [-1, 1]; sigma from
    the exponential bandwidth map (see geometry.sigma_from_raw); seeds =
    sigmoid(seed_raw) in [0, 1]. Field shapes are (C, H, W), or
    (B, C, H, W) for a batched forward pass.
    """

    offset_raw: torch.Tensor
    sigma_raw: torch.Tensor
    seed_raw: torch.Tensor
    offsets: torch.Tensor
    sigma: torch.Tensor
    seeds: torch.Tensor

    @property
    def batched(self) -> bool:
        return self.offset_raw.ndim == 4

    def __getitem__(self, i: int) -> "ModelOutput":
        if not self.batched:
            raise IndexError("output is not batched")
        return ModelOutput(
            offset_raw=self.offset_raw[i],
            sigma_raw=self.sigma_raw[i],
            seed_raw=self.seed_raw[i],
            offsets=self.offsets[i],
            sigma=self.sigma[i],
            seeds=self.seeds[i],
        )


def activate_heads(offset_raw, sigma_raw, seed_raw) -> ModelOutput:
    """Apply the head activations; the single authority used by both the
    network forward pass and the gradient-check harness."""
    return ModelOutput(
        offset_raw=offset_raw,
        sigma_raw=sigma_raw,
        seed_raw=seed_raw,
        offsets=torch.tanh(offset_raw),
        sigma=sigma_from_raw(sigma_raw),
        seeds=torch.sigmoid(seed_raw),
    )


class Network(nn.Module):
    def __init__(self, config: ModelConfig = None):
        super().__init__()
        cfg = config or ModelConfig()
        self.config = cfg
        w = cfg.widths
        g = cfg.groupnorm_groups
        with torch.random.fork_rng():
            torch.manual_seed(cfg.init_seed)
            self.stem = _Block(cfg.in_channels, w[0], g)
            downs = []
            for i in range(1, len(w)):
                downs.append(nn.Sequential(
                    nn.Conv2d(w[i - 1], w[i], 3, stride=2, padding=1),
                    _Block(w[i], w[i], g),
                ))
            self.downs = nn.ModuleList(downs)
            self.geo_decoder = _Decoder(w, 2 + cfg.sigma_channels, g)
            self.seed_decoder = _Decoder(w, cfg.num_classes, g)
            self._init_heads()

    def _init_heads(self):
        cfg = self.config
        geo = self.geo_decoder.head
        nn.init.zeros_(geo.weight)
        nn.init.zeros_(geo.bias)
        seed = self.seed_decoder.head
        nn.init.zeros_(seed.weight)
        nn.init.constant_(seed.bias, cfg.seed_bias)
        self.init_sigma_bias(cfg.init_margin_px, cfg.init_grid_height)

    def init_sigma_bias(self, margin_px: float, grid_height: int) -> float:
        """Set the sigma head bias so that a zero-weight head emits exactly
        the bandwidth whose 0.5-crossing is margin_px pixels. Returns the
        raw bias value written."""
        raw = float(sigma_to_raw(margin_to_sigma(margin_px / grid_height)))
        with torch.no_grad():
            self.geo_decoder.head.bias[2:] = raw
        return raw

    def forward(self, image) -> ModelOutput:
        x = torch.as_tensor(image)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(
                f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        d = self.config.downsample
        if x.shape[-2] % d or x.shape[-1] % d:
            raise ValueError(f"input H and W must be multiples of {d}, got {tuple(x.shape[-2:])}")
        feats = [self.stem(x)]
        for down in self.downs:
            feats.append(down(feats[-1]))
        geo = self.geo_decoder(feats)
        seed_raw = self.seed_decoder(feats)
        offset_raw, sigma_raw = geo[:, :2], geo[:, 2:]
        if single:
            offset_raw, sigma_raw, seed_raw = offset_raw[0], sigma_raw[0], seed_raw[0]
        return activate_heads(offset_raw, sigma_raw, seed_raw)

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def save_checkpoint(path, model: Network, *, epoch: int = 0, optimizer=None,
                    extra: dict = None) -> Path:
    """Write model (and optionally Adam optimizer) state to a single .npz.

    Weight tensors are stored as named float arrays; configuration and
    bookkeeping travel in an embedded JSON string. Round-trips bit for bit.
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(path.suffix + ".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for key, tensor in model.state_dict().items():
        arrays[f"param/{key}"] = tensor.detach().cpu().numpy()
    meta = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "model_config": asdict(model.config),
        "epoch": int(epoch),
        "extra": extra or {},
        "optimizer": None,
    }
    if optimizer is not None:
        state = optimizer.state_dict()
        groups = []
        for group in state["param_groups"]:
            groups.append({k: v for k, v in group.items()})
        meta["optimizer"] = {"param_groups": groups, "state_keys": {}}
        for pid, pstate in state["state"].items():
            keys = []
            for name, value in pstate.items():
                arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) \
                    else np.asarray(value)
                arrays[f"opt/{pid}/{name}"] = arr
                keys.append(name)
            meta["optimizer"]["state_keys"][str(pid)] = keys
    arrays["meta"] = np.array(json.dumps(meta))
    np.savez(path, **arrays)
    return path


@dataclass
class LoadedCheckpoint:
    model: Network
    config: ModelConfig
    epoch: int
    extra: dict
    optimizer_state: dict


def load_checkpoint(path) -> LoadedCheckpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(str(path))
    with np.load(path, allow_pickle=False) as data:
        if "meta" not in data:
            raise ValueError(f"{path} is not a checkpoint (no meta entry)")
        meta = json.loads(str(data["meta"]))
        if meta.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('checkpoint_version')}")
        cfg = ModelConfig(**{**meta["model_config"],
                             "widths": tuple(meta["model_config"]["widths"])})
        model = Network(cfg)
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy())
                 for k in data.files if k.startswith("param/")}
        model.load_state_dict(state, strict=True)
        optimizer_state = None
        if meta["optimizer"] is not None:
            opt_meta = meta["optimizer"]
            opt_state = {}
            for pid, keys in opt_meta["state_keys"].items():
                entry = {}
                for name in keys:
                    arr = torch.from_numpy(data[f"opt/{pid}/{name}"].copy())
                    entry[name] = arr
                opt_state[int(pid)] = entry
            groups = []
            for group in opt_meta["param_groups"]:
                group = dict(group)
                if "betas" in group:
                    # JSON has no tuples; restore the type torch hands out
                    group["betas"] = tuple(group["betas"])
                groups.append(group)
            optimizer_state = {"state": opt_state, "param_groups": groups}
    return LoadedCheckpoint(
        model=model,
        config=cfg,
        epoch=int(meta["epoch"]),
        extra=meta.get("extra") or {},
        optimizer_state=optimizer_state,
    )
