import numpy as np
import pytest

from anchordet.sampling import farthest_point_sample


def min_pairwise_dist(pts):
    d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return d.min()


def test_two_of_three_collinear():
    pts = np.array([[0, 0, 0], [5, 0, 0], [10, 0, 0]], dtype=float)
    res = farthest_point_sample(pts, 2, start_index=0)
    assert set(res.source_indices.tolist()) == {0, 2}


def test_third_pick_is_remaining_point():
    pts = np.array([[0, 0, 0], [5, 0, 0], [10, 0, 0]], dtype=float)
    res = farthest_point_sample(pts, 3, start_index=0)
    assert res.source_indices.tolist() == [0, 2, 1]


def test_beats_random_subsets():
    # FPS spreads points at least as well as random subsets of the same size.
    rng = np.random.default_rng(0)
    pts = rng.uniform(-50, 50, size=(1000, 3))
    fps = farthest_point_sample(pts, 50, start_index=0)
    fps_min = min_pairwise_dist(fps.locations)
    for seed in range(20):
        sub = np.random.default_rng(seed).choice(1000, size=50, replace=False)
        assert fps_min >= min_pairwise_dist(pts[sub])


def test_greedy_optimality_scan():
    rng = np.random.default_rng(1)
    pts = rng.uniform(0, 10, size=(200, 3))
    res = farthest_point_sample(pts, 20, start_index=0)
    chosen = list(res.source_indices)
    for k in range(1, 20):
        prior = pts[chosen[:k]]
        min_d = np.linalg.norm(pts[:, None, :] - prior[None, :, :], axis=-1).min(axis=1)
        assert min_d[chosen[k]] >= min_d.max() - 1e-12


def test_determinism():
    rng = np.random.default_rng(2)
    pts = rng.uniform(0, 10, size=(100, 3))
    a = farthest_point_sample(pts, 10, start_index=3)
    b = farthest_point_sample(pts, 10, start_index=3)
    assert a.source_indices.tolist() == b.source_indices.tolist()


def test_start_index_respected():
    rng = np.random.default_rng(3)
    pts = rng.uniform(0, 10, size=(50, 3))
    res = farthest_point_sample(pts, 5, start_index=7)
    assert res.source_indices[0] == 7
    assert np.allclose(res.locations[0], pts[7])


def test_padding_when_m_exceeds_points():
    pts = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    res = farthest_point_sample(pts, 5, start_index=0)
    assert res.padded
    assert len(res.locations) == 5
    assert res.source_indices.tolist()[2:] == [1, 1, 1]


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        farthest_point_sample(np.zeros((0, 3)), 1)
