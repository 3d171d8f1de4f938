"""Directory serialization for named per-pixel arrays.

A field directory holds one raw binary file per field plus a JSON
manifest. Binaries are little-endian, C (row-major) order, with no
header; shapes and dtypes live only in the manifest, so the .bin files
are loadable from any language with a single fromfile call.
"""

import json
import re
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
FORMAT_NAME = "pixelfield"
FORMAT_VERSION = 1

_ALLOWED_DTYPES = ("float32", "float64", "int16", "int32", "int64", "uint8", "uint16")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


def save_pixel_fields(path, fields: dict) -> Path:
    """Write `fields` (name -> array of shape (H, W) or (C, H, W)) to `path`.

    All fields must share the same trailing (H, W) grid. Returns the
    directory path.
    """
    if not fields:
        raise ValueError("no fields to save")
    grid = None
    arrays = {}
    for name, arr in fields.items():
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid field name {name!r}")
        arr = np.ascontiguousarray(arr)
        if arr.dtype.name not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {arr.dtype.name!r} for field {name!r}")
        if arr.ndim not in (2, 3):
            raise ValueError(f"field {name!r} must be 2-D or 3-D, got shape {arr.shape}")
        hw = arr.shape[-2:]
        if grid is None:
            grid = hw
        elif hw != grid:
            raise ValueError(f"field {name!r} grid {hw} != {grid}")
        arrays[name] = arr

    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "grid": [int(grid[0]), int(grid[1])],
        "fields": {},
    }
    for name, arr in arrays.items():
        little = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        (path / f"{name}.bin").write_bytes(little.tobytes(order="C"))
        manifest["fields"][name] = {"shape": list(arr.shape), "dtype": arr.dtype.name}
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_pixel_fields(path) -> dict:
    """Load a field directory written by save_pixel_fields."""
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != FORMAT_NAME:
        raise ValueError(f"not a {FORMAT_NAME} directory: {path}")
    out = {}
    for name, meta in manifest["fields"].items():
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid field name {name!r} in manifest")
        dtype = np.dtype(meta["dtype"])
        if dtype.name not in _ALLOWED_DTYPES:
            raise ValueError(f"unsupported dtype {meta['dtype']!r} in manifest")
        shape = tuple(int(s) for s in meta["shape"])
        raw = (path / f"{name}.bin").read_bytes()
        expected = int(np.prod(shape)) * dtype.itemsize
        if len(raw) != expected:
            raise ValueError(
                f"field {name!r}: file has {len(raw)} bytes, manifest implies {expected}"
            )
        arr = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(shape)
        out[name] = arr.astype(dtype, copy=False)
    return out
