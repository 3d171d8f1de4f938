import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from seedclust.labels import InstanceLabelMap
from seedclust.model import activate_heads

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def random_label_map(rng, h, w, max_instances=4, num_classes=2,
                     min_instances=0) -> InstanceLabelMap:
    """Random blobby label map: rectangles painted in z-order, relabeled."""
    k = int(rng.integers(min_instances, max_instances + 1))
    ids = np.zeros((h, w), dtype=np.int32)
    class_raw = {}
    for i in range(1, k + 1):
        r0 = int(rng.integers(0, h))
        c0 = int(rng.integers(0, w))
        r1 = int(rng.integers(r0, h)) + 1
        c1 = int(rng.integers(c0, w)) + 1
        ids[r0:r1, c0:c1] = i
        class_raw[i] = int(rng.integers(0, num_classes))
    from seedclust.labels import relabel_contiguous

    return relabel_contiguous(ids, class_raw)


def random_output(rng, h, w, sigma_channels=1, num_classes=2,
                  dtype=torch.float64):
    """Random activated ModelOutput with sane field statistics."""
    offset_raw = torch.from_numpy(rng.normal(0, 0.7, (2, h, w))).to(dtype)
    sigma_raw = torch.from_numpy(rng.normal(2.0, 0.5, (sigma_channels, h, w))).to(dtype)
    seed_raw = torch.from_numpy(rng.normal(-1.0, 1.0, (num_classes, h, w))).to(dtype)
    return activate_heads(offset_raw, sigma_raw, seed_raw)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
