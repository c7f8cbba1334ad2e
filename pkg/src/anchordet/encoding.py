"""Positional encodings: Fourier anchor encoding and the sinusoidal grid encoding.

Anchor locations are encoded as FFN([sin(B rho), cos(B rho)]) with a fixed
random matrix B; backbone grid tokens get a deterministic two-axis
sinusoidal encoding over metric cell-center coordinates.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

from .errors import ConfigError

GRID_PE_TEMPERATURE = 10000.0


def make_fourier_basis(d: int, seed: int, scale: float = 2.0 * math.pi) -> torch.Tensor:
    """Fixed (d/2, 3) matrix of N(0,1) entries times `scale`.

    Anchor coordinates are normalized to [0,1] before multiplication, so
    scale 2*pi makes the lowest frequencies span about one period per
    scene extent.
    """
    if d % 2 != 0:
        raise ConfigError("model dimension d must be even for the Fourier basis")
    gen = torch.Generator().manual_seed(seed)
    return torch.randn((d // 2, 3), generator=gen) * scale


def fourier_features(rho: torch.Tensor, basis: torch.Tensor) -> torch.Tensor:
    """[sin(B rho), cos(B rho)] of length d for coordinates rho (..., 3)."""
    proj = rho @ basis.T  # (..., d/2)
    return torch.cat([torch.sin(proj), torch.cos(proj)], dim=-1)


# Gaussian frequency multiplier for anchor encodings. At 1.0 the typical
# wavelength is one scene extent. Higher values resolve position more
# sharply but generalize poorly to anchor locations unseen in training
# (nearby anchors get near-orthogonal codes), which hurts held-out AP.
ANCHOR_FREQUENCY_SCALE = 1.0


class AnchorEncoder(nn.Module):
    """Encodes a 3D anchor location into a d-dim query token.

    One instance is shared between the layer-0 query construction and
    every refinement re-encoding; no per-layer copies exist.
    """

    def __init__(
        self,
        d: int,
        extent: tuple[float, float, float, float],
        z_range: tuple[float, float] = (-2.0, 8.0),
        seed: int = 0,
        frequency_scale: float = ANCHOR_FREQUENCY_SCALE,
    ):
        super().__init__()
        basis = make_fourier_basis(d, seed, scale=2.0 * math.pi * frequency_scale)
        self.register_buffer("basis", basis)
        x_min, x_max, y_min, y_max = extent
        z_min, z_max = z_range
        lo = torch.tensor([x_min, y_min, z_min], dtype=torch.float32)
        span = torch.tensor(
            [x_max - x_min, y_max - y_min, z_max - z_min], dtype=torch.float32
        )
        self.register_buffer("norm_lo", lo)
        self.register_buffer("norm_span", span)
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)

    def normalize(self, rho: torch.Tensor) -> torch.Tensor:
        return (rho - self.norm_lo) / self.norm_span

    def forward(self, rho: torch.Tensor) -> torch.Tensor:
        """rho (..., 3) in meters -> (..., d) query token."""
        feats = fourier_features(self.normalize(rho), self.basis)
        return self.fc2(torch.relu(self.fc1(feats)))


def grid_positional_encoding(grid_dims: tuple[int, int], d: int) -> torch.Tensor:
    """Deterministic sinusoidal encoding of BEV cell centers, (H*W, d).

    First d/2 entries encode the x coordinate, last d/2 the y coordinate,
    each with the standard interleaved sin/cos geometric frequency
    progression over the integer cell index, as in the original transformer
    position encoding. Rows are flattened row-major (row*W + col).
    """
    if d % 4 != 0:
        raise ConfigError("grid positional encoding requires d divisible by 4")
    h, w = grid_dims
    xs = torch.arange(w, dtype=torch.float32)
    ys = torch.arange(h, dtype=torch.float32)

    half = d // 2
    freq_idx = torch.arange(half, dtype=torch.float32) // 2  # pairs share a frequency
    inv_freq = GRID_PE_TEMPERATURE ** (2.0 * freq_idx / half)

    def axis_encoding(coords: torch.Tensor) -> torch.Tensor:
        ang = coords[:, None] / inv_freq[None, :]
        enc = torch.empty(len(coords), half)
        enc[:, 0::2] = torch.sin(ang[:, 0::2])
        enc[:, 1::2] = torch.cos(ang[:, 1::2])
        return enc

    ex = axis_encoding(xs)  # (W, d/2)
    ey = axis_encoding(ys)  # (H, d/2)
    pe = torch.cat(
        [ex[None, :, :].expand(h, w, half), ey[:, None, :].expand(h, w, half)], dim=-1
    )
    return pe.reshape(h * w, d)
