"""Lovasz hinge: a convex surrogate for binary set IoU.

The loss extends the Jaccard set function to real-valued scores by
sorting hinge errors in decreasing order and weighting each by the
increment of the Jaccard loss along the sorted prefix chain. It is
piecewise linear, nonnegative, and exactly zero when every score has
the correct sign with margin >= 1.
"""

import numpy as np
import torch


def _jaccard_grad(truth_sorted: torch.Tensor) -> torch.Tensor:
    """Increments of the Jaccard loss along the sorted prefix chain.

    truth_sorted holds {0, 1} floats in the error-sorted order. Entry p is
    J(S_{p+1}) - J(S_p) where S_p is the first p positions and
    J(S) = 1 - |FG \\ S| / |FG u S|.
    """
    fg_total = truth_sorted.sum()
    intersection = fg_total - truth_sorted.cumsum(0)
    union = fg_total + (1.0 - truth_sorted).cumsum(0)
    jaccard = 1.0 - intersection / union
    if truth_sorted.numel() > 1:
        return torch.cat([jaccard[:1], jaccard[1:] - jaccard[:-1]])
    return jaccard


def lovasz_hinge(scores, truth) -> torch.Tensor:
    """Lovasz extension of the Jaccard loss over hinge errors.

    scores: 1-D real scores, positive favoring foreground.
    truth: 1-D binary ground truth of the same length.

    Errors 1 - score * sign(truth) are sorted in decreasing order (stable,
    so ties keep index order) and the clipped errors are dotted with the
    Jaccard increments. For a single pixel this reduces to the plain hinge
    max(0, 1 - score * sign).
    """
    scores = torch.as_tensor(scores)
    if not scores.is_floating_point():
        scores = scores.double()
    truth = torch.as_tensor(truth)
    if scores.ndim != 1 or truth.ndim != 1:
        raise ValueError("scores and truth must be 1-D")
    if scores.shape[0] != truth.shape[0]:
        raise ValueError(f"length mismatch: {scores.shape[0]} vs {truth.shape[0]}")
    if scores.numel() == 0:
        raise ValueError("empty problem")
    if not bool(torch.isfinite(scores.detach()).all()):
        raise ValueError("scores must be finite")
    truth = truth.to(scores.dtype)
    signs = 2.0 * truth - 1.0
    errors = 1.0 - scores * signs
    errors_sorted, perm = torch.sort(errors, dim=0, descending=True, stable=True)
    weights = _jaccard_grad(truth[perm])
    return torch.relu(errors_sorted).dot(weights)


def phi_to_score(phi):
    """Map a Gaussian assignment phi in [0, 1] to a score in [-1, 1].

    score = 2 phi - 1, so the hinge decision boundary score == 0 coincides
    with phi == 0.5. phi == 0 is accepted as the underflow limit of a far
    away embedding.
    """
    if isinstance(phi, torch.Tensor):
        p = phi.detach()
        bad = bool((p < 0).any() or (p > 1).any())
    else:
        p = np.asarray(phi)
        bad = bool((p < 0).any() or (p > 1).any())
    if bad:
        raise ValueError("phi out of range [0, 1]")
    return 2.0 * phi - 1.0
