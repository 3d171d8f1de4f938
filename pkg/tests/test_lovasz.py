import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from seedclust.lovasz import lovasz_hinge, phi_to_score

from .oracles import lovasz_extension_bruteforce


def _problem(draw_scores, draw_truth):
    return np.asarray(draw_scores, dtype=np.float64), np.asarray(draw_truth)


class TestHandComputed:
    def test_three_pixel_case(self):
        # errors [0.5, 0.8, 0.9] -> sorted [0.9, 0.8, 0.5] with truths [1, 0, 1]
        # jaccard chain deltas [1/2, 1/6, 1/3] -> 0.45 + 0.8/6 + 0.5/3 = 0.75
        loss = lovasz_hinge(np.array([0.5, -0.2, 0.1]), np.array([1, 0, 1]))
        assert float(loss) == pytest.approx(0.75, abs=1e-12)

    def test_single_pixel_is_plain_hinge(self):
        for s in (-1.5, -0.3, 0.0, 0.4, 2.0):
            for t in (0, 1):
                sign = 2 * t - 1
                want = max(0.0, 1.0 - s * sign)
                got = float(lovasz_hinge(np.array([s]), np.array([t])))
                assert got == want

    def test_all_background_gradient(self):
        # With no foreground the first sorted weight is 1, the rest 0.
        scores = torch.tensor([0.4, -0.2, 0.1], dtype=torch.float64,
                              requires_grad=True)
        loss = lovasz_hinge(scores, torch.zeros(3))
        loss.backward()
        # Only the largest error (largest score for background) gets gradient.
        assert scores.grad[0].item() == pytest.approx(1.0)
        assert scores.grad[1].item() == 0.0
        assert scores.grad[2].item() == 0.0

    def test_zero_iff_margins_satisfied(self):
        scores = np.array([1.0, -1.0, 2.5, -3.0])
        truth = np.array([1, 0, 1, 0])
        assert float(lovasz_hinge(scores, truth)) == 0.0
        scores[0] = 0.999
        assert float(lovasz_hinge(scores, truth)) > 0.0


class TestAgainstOracle:
    @given(
        n=st.integers(1, 8),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=300)
    def test_matches_bruteforce(self, n, seed):
        r = np.random.default_rng(seed)
        scores = r.normal(0, 1.5, n)
        truth = r.integers(0, 2, n)
        got = float(lovasz_hinge(scores, truth))
        want = lovasz_extension_bruteforce(scores, truth)
        assert got == pytest.approx(want, abs=1e-9)

    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=100)
    def test_matches_bruteforce_with_ties(self, seed):
        r = np.random.default_rng(seed)
        n = int(r.integers(2, 9))
        # Quantized scores force frequent exact error ties.
        scores = r.integers(-2, 3, n) * 0.5
        truth = r.integers(0, 2, n)
        got = float(lovasz_hinge(scores, truth))
        want = lovasz_extension_bruteforce(scores, truth)
        assert got == pytest.approx(want, abs=1e-9)


class TestProperties:
    @given(n=st.integers(1, 32), seed=st.integers(0, 2**32 - 1))
    def test_nonnegative(self, n, seed):
        r = np.random.default_rng(seed)
        loss = lovasz_hinge(r.normal(0, 2, n), r.integers(0, 2, n))
        assert float(loss) >= 0.0

    @given(n=st.integers(1, 32), seed=st.integers(0, 2**32 - 1))
    def test_zero_when_all_margins_met(self, n, seed):
        r = np.random.default_rng(seed)
        truth = r.integers(0, 2, n)
        signs = 2.0 * truth - 1.0
        scores = signs * r.uniform(1.0, 3.0, n)
        assert float(lovasz_hinge(scores, truth)) == 0.0

    def test_gradient_flows(self):
        scores = torch.randn(10, dtype=torch.float64, requires_grad=True)
        truth = torch.tensor([1, 0] * 5)
        lovasz_hinge(scores, truth).backward()
        assert scores.grad is not None
        assert torch.isfinite(scores.grad).all()


class TestValidation:
    def test_empty(self):
        with pytest.raises(ValueError):
            lovasz_hinge(np.array([]), np.array([]))

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            lovasz_hinge(np.zeros(3), np.zeros(4))

    def test_non_finite(self):
        with pytest.raises(ValueError):
            lovasz_hinge(np.array([1.0, np.nan]), np.array([1, 0]))

    def test_not_1d(self):
        with pytest.raises(ValueError):
            lovasz_hinge(np.zeros((2, 2)), np.zeros((2, 2)))


class TestPhiToScore:
    def test_boundary_maps_to_zero(self):
        assert phi_to_score(0.5) == 0.0

    @given(phi=st.floats(0.0, 1.0))
    def test_range(self, phi):
        s = phi_to_score(phi)
        assert -1.0 <= s <= 1.0
        assert s == 2.0 * phi - 1.0

    def test_accepts_underflowed_zero(self):
        assert phi_to_score(0.0) == -1.0

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            phi_to_score(1.0001)
        with pytest.raises(ValueError):
            phi_to_score(np.array([0.5, -0.001]))

    def test_torch_gradient(self):
        phi = torch.tensor([0.3, 0.9], dtype=torch.float64, requires_grad=True)
        phi_to_score(phi).sum().backward()
        assert torch.all(phi.grad == 2.0)
