"""Farthest point sampling of query anchor locations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AnchorSet:
    """M anchor locations picked from the input cloud.

    When the cloud has fewer than M points, the last selected point is
    repeated to fill the remaining slots and `padded` is set.
    """

    locations: np.ndarray  # (M, 3)
    source_indices: np.ndarray  # (M,) indices into the input cloud
    padded: bool = False


def farthest_point_sample(points: np.ndarray, m: int, start_index: int = 0) -> AnchorSet:
    """Greedy FPS in 3D: each pick maximizes the min distance to prior picks.

    Ties break toward the lowest index. O(N*M) via an incrementally
    maintained per-point min-distance array.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if n == 0:
        raise ValueError("cannot sample from an empty point cloud")
    if m < 1:
        raise ValueError("m must be >= 1")
    if not (0 <= start_index < n):
        raise ValueError(f"start_index {start_index} out of range [0, {n})")

    k = min(m, n)
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    min_dist = np.linalg.norm(points - points[start_index], axis=1)
    for i in range(1, k):
        idx = int(np.argmax(min_dist))  # argmax returns the first max: lowest index
        chosen[i] = idx
        np.minimum(min_dist, np.linalg.norm(points - points[idx], axis=1), out=min_dist)

    if k < m:
        chosen = np.concatenate([chosen, np.full(m - k, chosen[-1], dtype=np.int64)])
        return AnchorSet(points[chosen].copy(), chosen, padded=True)
    return AnchorSet(points[chosen].copy(), chosen, padded=False)
