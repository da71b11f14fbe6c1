"""Integrate-and-fire segmentation: firing rules, rescaling, averages."""
import numpy as np
import pytest

from helpers import cif_simulate_free_running
from ssr.alignment import CifWeights, FeatureSequence, cif_segment


def test_weight_equal_threshold_every_frame_fires():
    rng = np.random.default_rng(0)
    frames = rng.normal(size=(5, 3))
    weights = CifWeights(np.full(5, 0.5), threshold=0.5)
    bounds, rows = cif_segment(FeatureSequence(frames), weights)
    assert bounds.indices == (0, 1, 2, 3, 4)
    assert np.allclose(rows, frames)


def test_exact_multiple_total_with_matching_expected_is_identity_scaling():
    rng = np.random.default_rng(1)
    frames = rng.normal(size=(6, 2))
    alphas = np.full(6, 0.5)  # total 3.0 = 3 thresholds
    bounds, rows = cif_segment(FeatureSequence(frames), CifWeights(alphas, 1.0), expected_m=3)
    assert len(bounds) == 3
    assert bounds.indices == (1, 3, 5)
    expected = np.stack([frames[0:2].mean(axis=0), frames[2:4].mean(axis=0), frames[4:6].mean(axis=0)])
    assert np.allclose(rows, expected)


def test_hand_simulated_free_running_example():
    frames = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]])
    weights = CifWeights(np.array([0.6, 0.6, 0.8]), threshold=1.0)
    bounds, rows = cif_segment(FeatureSequence(frames), weights)
    # fires inside the second frame (0.6 + 0.4), then the residual
    # 0.2 + 0.8 = 1.0 fires exactly at the last frame
    assert bounds.indices == (1, 2)
    assert np.allclose(rows[0], 0.6 * frames[0] + 0.4 * frames[1])
    assert np.allclose(rows[1], 0.2 * frames[1] + 0.8 * frames[2])


def test_small_residual_merges_into_last_segment():
    frames = np.array([[1.0], [3.0], [5.0]])
    weights = CifWeights(np.array([0.5, 0.5, 0.2]), threshold=1.0)
    bounds, rows = cif_segment(FeatureSequence(frames), weights)
    # one fire at frame 1, residual 0.2 < beta/2 merges
    assert bounds.indices == (2,)
    assert np.allclose(rows[0], (0.5 * 1.0 + 0.5 * 3.0 + 0.2 * 5.0) / 1.2)


def test_large_residual_becomes_final_segment():
    frames = np.array([[1.0], [3.0], [5.0]])
    weights = CifWeights(np.array([0.5, 0.5, 0.6]), threshold=1.0)
    bounds, rows = cif_segment(FeatureSequence(frames), weights)
    assert bounds.indices == (1, 2)
    assert np.allclose(rows[1], 5.0)


def test_never_fires_collapses_to_one_segment():
    frames = np.array([[2.0], [4.0]])
    weights = CifWeights(np.array([0.1, 0.1]), threshold=1.0)
    bounds, rows = cif_segment(FeatureSequence(frames), weights)
    assert bounds.indices == (1,)
    assert np.allclose(rows[0], 3.0)


def test_free_running_count_matches_simulation():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        alphas = rng.uniform(0.05, 0.95, size=n)
        beta = float(rng.uniform(0.96, 2.0))
        fs = FeatureSequence(rng.normal(size=(n, 3)))
        bounds, rows = cif_segment(fs, CifWeights(alphas, beta))
        assert len(bounds) == cif_simulate_free_running(alphas, beta) == rows.shape[0]
        assert bounds.indices[-1] == n - 1


def test_teacher_forcing_exact_segment_count():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = int(rng.integers(2, 40))
        alphas = rng.uniform(0.4, 0.75, size=n)
        m = int(rng.integers(1, max(2, n // 2 + 1)))
        fs = FeatureSequence(rng.normal(size=(n, 2)))
        bounds, rows = cif_segment(fs, CifWeights(alphas, 1.0), expected_m=m)
        assert len(bounds) == m == rows.shape[0]
        assert bounds.indices[-1] == n - 1


def test_rows_in_convex_hull_of_chunk():
    rng = np.random.default_rng(8)
    n = 20
    alphas = rng.uniform(0.4, 0.75, size=n)
    fs = FeatureSequence(rng.normal(size=(n, 1)))
    bounds, rows = cif_segment(fs, CifWeights(alphas, 1.0), expected_m=5)
    start = 0
    for i, end in enumerate(bounds.indices):
        # the firing frame is shared with the next segment, so the hull spans
        # from the previous boundary (inclusive) through this one
        lo = fs.frames[max(0, start - 1) : end + 1].min()
        hi = fs.frames[max(0, start - 1) : end + 1].max()
        assert lo - 1e-12 <= rows[i, 0] <= hi + 1e-12
        start = end + 1


def test_expected_m_larger_than_frames_rejected():
    fs = FeatureSequence(np.zeros((3, 2)) + 1.0)
    with pytest.raises(ValueError, match="cannot produce"):
        cif_segment(fs, CifWeights(np.full(3, 0.5)), expected_m=4)


def test_multi_fire_within_frame_rejected():
    fs = FeatureSequence(np.ones((4, 2)))
    weights = CifWeights(np.array([0.9, 0.05, 0.05, 0.05]))
    # rescaling to 3 thresholds makes frame 0 carry ~2.57 units of mass
    with pytest.raises(ValueError, match="more than one segment"):
        cif_segment(fs, weights, expected_m=3)


def test_weight_count_must_match_frames():
    fs = FeatureSequence(np.ones((4, 2)))
    with pytest.raises(ValueError, match="cover"):
        cif_segment(fs, CifWeights(np.full(3, 0.5)))
