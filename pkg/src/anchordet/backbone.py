"""Pillar-grid backbone: buckets points into BEV cells and encodes each
cell into one feature token, producing the key/value sequence for the
decoder's cross-attention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoding import grid_positional_encoding
from .errors import ConfigError
from .scene import Scene

POINT_FEATURE_DIM = 6  # (x, y, z, x-cx, y-cy, z-zbar)


@dataclass(frozen=True)
class GridConfig:
    extent: tuple[float, float, float, float]
    cell_size: float
    d: int
    max_points_per_pillar: int = 16

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ConfigError("cell_size must be positive")
        if self.max_points_per_pillar < 1:
            raise ConfigError("max_points_per_pillar must be >= 1")

    @property
    def grid_dims(self) -> tuple[int, int]:
        x_min, x_max, y_min, y_max = self.extent
        w = int(np.ceil((x_max - x_min) / self.cell_size - 1e-9))
        h = int(np.ceil((y_max - y_min) / self.cell_size - 1e-9))
        return h, w

    @property
    def num_tokens(self) -> int:
        h, w = self.grid_dims
        return h * w

    def cell_centers(self) -> np.ndarray:
        """(H*W, 2) metric centers, row-major (rows follow y, columns x)."""
        h, w = self.grid_dims
        x_min, _, y_min, _ = self.extent
        xs = x_min + (np.arange(w) + 0.5) * self.cell_size
        ys = y_min + (np.arange(h) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)  # (H, W)
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass
class PillarTensor:
    """Fixed-size point buckets per BEV cell, ready for the encoder."""

    features: torch.Tensor  # (H*W, P, 6)
    point_mask: torch.Tensor  # (H*W, P) bool, true where a real point sits
    nonempty: torch.Tensor  # (H*W,) bool


@dataclass
class TokenSequence:
    features: torch.Tensor  # (N, d)
    cell_centers: np.ndarray  # (N, 2)
    nonempty: torch.Tensor  # (N,) bool


def pillarize(scene: Scene, cfg: GridConfig, seed: int = 0) -> PillarTensor:
    """Bucket scene points by BEV cell; keep at most P per cell.

    Cells holding more than P points are subsampled with a seeded RNG so
    the result is deterministic. Per-point features are the raw
    coordinates plus offsets from the cell center and the pillar z-mean.
    """
    h, w = cfg.grid_dims
    n = h * w
    p = cfg.max_points_per_pillar
    x_min, _, y_min, _ = cfg.extent

    pts = scene.points
    ix = np.minimum(((pts[:, 0] - x_min) / cfg.cell_size).astype(np.int64), w - 1)
    iy = np.minimum(((pts[:, 1] - y_min) / cfg.cell_size).astype(np.int64), h - 1)
    cell = iy * w + ix

    centers = cfg.cell_centers()
    feats = np.zeros((n, p, POINT_FEATURE_DIM), dtype=np.float32)
    mask = np.zeros((n, p), dtype=bool)
    rng = np.random.default_rng(seed)

    order = np.argsort(cell, kind="stable")
    sorted_cells = cell[order]
    boundaries = np.flatnonzero(np.diff(sorted_cells)) + 1
    groups = np.split(order, boundaries)
    for grp in groups:
        c = int(cell[grp[0]])
        if len(grp) > p:
            grp = grp[np.sort(rng.choice(len(grp), size=p, replace=False))]
        sel = pts[grp]
        k = len(sel)
        zbar = sel[:, 2].mean()
        feats[c, :k, 0:3] = sel
        feats[c, :k, 3] = sel[:, 0] - centers[c, 0]
        feats[c, :k, 4] = sel[:, 1] - centers[c, 1]
        feats[c, :k, 5] = sel[:, 2] - zbar
        mask[c, :k] = True

    return PillarTensor(
        features=torch.from_numpy(feats),
        point_mask=torch.from_numpy(mask),
        nonempty=torch.from_numpy(mask.any(axis=1)),
    )


class PillarBackbone(nn.Module):
    """Point MLP + max-pool per pillar, one 3x3 BEV conv for local context.

    Empty pillars bypass the conv output and receive a learned placeholder
    vector. The grid is flattened row-major and the sinusoidal grid
    encoding is added, yielding the decoder key/value tokens.
    """

    def __init__(self, cfg: GridConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.point_fc = nn.Linear(POINT_FEATURE_DIM, d)
        self.conv = nn.Conv2d(d, d, kernel_size=3, padding=1)
        self.empty_token = nn.Parameter(torch.zeros(d))
        pe = grid_positional_encoding(cfg.grid_dims, d)
        self.register_buffer("grid_pe", pe)
        self._centers = cfg.cell_centers()

    def forward_batch(self, features: torch.Tensor, point_mask: torch.Tensor) -> torch.Tensor:
        """(B, N, P, 6) point features + (B, N, P) mask -> (B, N, d) tokens."""
        h, w = self.cfg.grid_dims
        d = self.cfg.d
        b = features.shape[0]
        nonempty = point_mask.any(dim=-1)  # (B, N)
        x = torch.relu(self.point_fc(features))  # (B, N, P, d)
        x = x.masked_fill(~point_mask[..., None], float("-inf"))
        pooled = x.max(dim=2).values
        pooled = torch.where(nonempty[..., None], pooled, torch.zeros_like(pooled))
        grid = pooled.permute(0, 2, 1).reshape(b, d, h, w)
        out = torch.relu(self.conv(grid)).reshape(b, d, h * w).permute(0, 2, 1)
        out = torch.where(nonempty[..., None], out, self.empty_token[None, None, :])
        return out + self.grid_pe  # (B, N, d) row-major over cells

    def forward(self, pillars: PillarTensor) -> TokenSequence:
        dtype = self.point_fc.weight.dtype
        feats = self.forward_batch(
            pillars.features[None].to(dtype), pillars.point_mask[None]
        )[0]
        return TokenSequence(
            features=feats,
            cell_centers=self._centers,
            nonempty=pillars.nonempty,
        )
