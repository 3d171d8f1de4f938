"""Instance label maps: dense id grids plus a per-instance class table."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class InstanceLabelMap:
    """Per-pixel instance ids with the class of each instance.

    ids: (H, W) integer array, 0 for background, instance ids contiguous
    from 1 to K with every id present (no empty instances).
    class_of: maps each instance id >= 1 to its semantic class channel.
    """

    ids: np.ndarray
    class_of: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = np.asarray(self.ids)
        if ids.ndim != 2:
            raise ValueError(f"ids must be 2-D, got shape {ids.shape}")
        if not np.issubdtype(ids.dtype, np.integer):
            raise ValueError(f"ids must be integer, got dtype {ids.dtype}")
        self.ids = ids.astype(np.int32, copy=False)
        present = np.unique(self.ids)
        present = present[present != 0]
        if present.size and (present[0] < 1 or present[-1] != present.size):
            raise ValueError("instance ids must be contiguous 1..K with no gaps")
        expected = set(int(p) for p in present)
        got = set(int(k) for k in self.class_of)
        if expected != got:
            raise ValueError(f"class_of keys {sorted(got)} != present ids {sorted(expected)}")
        for k, c in self.class_of.items():
            if int(c) < 0:
                raise ValueError(f"instance {k} has negative class {c}")
        self.class_of = {int(k): int(c) for k, c in self.class_of.items()}

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    @property
    def num_instances(self) -> int:
        return len(self.class_of)

    def mask(self, instance_id: int) -> np.ndarray:
        return self.ids == instance_id

    def pixel_count(self, instance_id: int) -> int:
        return int((self.ids == instance_id).sum())

    def hflip(self) -> "InstanceLabelMap":
        return InstanceLabelMap(np.ascontiguousarray(self.ids[:, ::-1]), dict(self.class_of))


def relabel_contiguous(raw_ids: np.ndarray, raw_class_of: dict) -> InstanceLabelMap:
    """Drop empty ids and renumber the remainder 1..K preserving order."""
    raw_ids = np.asarray(raw_ids)
    present = np.unique(raw_ids)
    present = present[present != 0]
    mapping = {int(old): new for new, old in enumerate(present, start=1)}
    ids = np.zeros(raw_ids.shape, dtype=np.int32)
    for old, new in mapping.items():
        ids[raw_ids == old] = new
    class_of = {new: int(raw_class_of[old]) for old, new in mapping.items()}
    return InstanceLabelMap(ids, class_of)
