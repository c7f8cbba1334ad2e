"""Decoder-only transformer detector with anchor-based queries.

M object queries, built by encoding farthest-point-sampled anchor
locations, pass through K decoder layers (self-attention, cross-attention
against the N backbone tokens, FFN). A shared estimation head decodes box
parameters relative to each query's anchor after every layer. Between
configured layers the anchors are refined onto the current box-center
estimates, re-encoded, and the propagated tokens are re-aligned by the
anchor alignment module.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import GridConfig, PillarBackbone, pillarize
from .encoding import AnchorEncoder
from .errors import ConfigError
from .sampling import farthest_point_sample
from .scene import Scene

BOX_REG_DIM = 10  # (dx, dy, dz, w, l, h, sin yaw, cos yaw, vx, vy)


@dataclass(frozen=True)
class DecoderConfig:
    k_layers: int
    d: int
    heads: int
    m_queries: int
    refine_layers: frozenset[int] = frozenset()  # layer indices in {1..K-1}
    num_classes: int = 1  # real classes; index num_classes is 'no-object'
    ffn_hidden: int = 0  # 0 -> 4*d
    mask_empty_cells: bool = False

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError("d must be divisible by the head count")
        if self.k_layers < 1 or self.m_queries < 1 or self.num_classes < 1:
            raise ConfigError("k_layers, m_queries and num_classes must be >= 1")
        validate_refine_layers(self.refine_layers, self.k_layers)

    @property
    def ffn_dim(self) -> int:
        return self.ffn_hidden if self.ffn_hidden > 0 else 4 * self.d


def validate_refine_layers(s_r, k_layers: int) -> frozenset[int]:
    s_r = frozenset(int(i) for i in s_r)
    if any(i < 1 or i >= k_layers for i in s_r):
        raise ConfigError(
            f"refinement layer indices must lie in [1, {k_layers - 1}], got {sorted(s_r)}"
        )
    return s_r


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention; returns outputs and per-head weights."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads != 0:
            raise ConfigError("d must be divisible by the head count")
        self.heads = heads
        self.d_head = d // heads
        self.wq = nn.Linear(d, d)
        self.wk = nn.Linear(d, d)
        self.wv = nn.Linear(d, d)
        self.wo = nn.Linear(d, d)

    def forward(self, queries, keys, values, key_mask=None):
        """queries (B, Mq, d), keys/values (B, Nk, d); 2D inputs allowed.

        Returns (output (B, Mq, d), weights (B, heads, Mq, Nk)). key_mask
        (B, Nk) True marks attendable keys.
        """
        squeeze = queries.dim() == 2
        if squeeze:
            queries, keys, values = queries[None], keys[None], values[None]
            if key_mask is not None:
                key_mask = key_mask[None]
        if queries.shape[-1] != keys.shape[-1] or keys.shape[:-1] != values.shape[:-1]:
            raise ValueError("inconsistent attention input shapes")
        b, mq, d = queries.shape
        nk = keys.shape[1]

        def split(x):
            return x.reshape(b, -1, self.heads, self.d_head).transpose(1, 2)

        q = split(self.wq(queries))  # (B, H, Mq, dh)
        k = split(self.wk(keys))
        v = split(self.wv(values))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.d_head)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        weights = torch.softmax(logits, dim=-1)  # (B, H, Mq, Nk)
        out = (weights @ v).transpose(1, 2).reshape(b, mq, d)
        out = self.wo(out)
        if squeeze:
            return out[0], weights[0]
        return out, weights


class DecoderLayer(nn.Module):
    """Pre-norm block: query self-attention, cross-attention, FFN."""

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        d = cfg.d
        self.self_attn = MultiHeadAttention(d, cfg.heads)
        self.cross_attn = MultiHeadAttention(d, cfg.heads)
        self.ln1 = nn.LayerNorm(d)
        self.ln2 = nn.LayerNorm(d)
        self.ln3 = nn.LayerNorm(d)
        # BEV memory tokens come in at raw feature scale; normalizing them
        # keeps the cross-attention logits in softmax's sensitive range
        self.ln_mem = nn.LayerNorm(d)
        self.ffn = nn.Sequential(
            nn.Linear(d, cfg.ffn_dim), nn.ReLU(), nn.Linear(cfg.ffn_dim, d)
        )

    def forward(self, x, memory, memory_mask=None):
        """x (B, M, d), memory (B, N, d) -> (x', cross weights (B, H, M, N))."""
        h = self.ln1(x)
        sa, _ = self.self_attn(h, h, h)
        x = x + sa
        mem = self.ln_mem(memory)
        ca, cross_w = self.cross_attn(self.ln2(x), mem, mem, key_mask=memory_mask)
        x = x + ca
        x = x + self.ffn(self.ln3(x))
        return x, cross_w


class EstimationHead(nn.Module):
    """Shared box head: one hidden layer, then regression and class logits.

    The same instance decodes every layer's output (and the pre-layer-0
    queries), which is what makes inter-layer anchor refinement and the
    alignment module's training target well defined.
    """

    def __init__(self, d: int, num_classes: int):
        super().__init__()
        self.shared = nn.Linear(d, d)
        self.reg = nn.Linear(d, BOX_REG_DIM)
        self.cls = nn.Linear(d, num_classes + 1)

    def forward(self, z):
        h = torch.relu(self.shared(z))
        return self.reg(h), self.cls(h)


class AnchorAlignment(nn.Module):
    """Residual two-layer FFN aligning a token with its refined anchor.

    With zero weights it is exactly the identity (skip connection).
    """

    def __init__(self, d: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d)
        self.fc2 = nn.Linear(d, d)

    def forward(self, z):
        return z + self.fc2(torch.relu(self.fc1(z)))


def decode_yaw(sin_raw: torch.Tensor, cos_raw: torch.Tensor) -> torch.Tensor:
    """Yaw from the raw (sin, cos) pair, unit-normalized first."""
    norm = torch.sqrt(sin_raw**2 + cos_raw**2).clamp_min(1e-12)
    return torch.atan2(sin_raw / norm, cos_raw / norm)


def absolute_boxes(reg: torch.Tensor, anchors: torch.Tensor) -> torch.Tensor:
    """Raw regression (..., M, 10) + anchors (..., M, 3) -> absolute 10-vectors."""
    out = reg.clone()
    out[..., 0:3] = reg[..., 0:3] + anchors
    return out


@dataclass
class Detection:
    center: np.ndarray  # (3,)
    size: np.ndarray  # (w, l, h)
    yaw: float
    vx: float
    vy: float
    class_id: int
    score: float
    query_index: int
    fq_travel: float  # BEV distance first anchor -> box center
    lq_travel: float  # BEV distance latest anchor -> box center


@dataclass
class DecoderOutput:
    """Everything the training loop and the diagnostics need."""

    layer_tokens: list[torch.Tensor]  # K x (B, M, d)
    layer_anchors: list[torch.Tensor]  # K x (B, M, 3), reference anchor per layer
    layer_encodings: list[torch.Tensor]  # K x (B, M, d), encoding added at each layer
    layer_reg: list[torch.Tensor]  # K x (B, M, 10) raw head regression
    layer_logits: list[torch.Tensor]  # K x (B, M, C+1)
    aux_reg: torch.Tensor  # (B, M, 10) pre-layer-0 head output on Y0
    aux_logits: torch.Tensor  # (B, M, C+1)
    cross_attention: list[torch.Tensor]  # K x (B, H, M, N)
    anchor_history: list[torch.Tensor]  # per refinement event + initial: (B, M, 3)

    @property
    def initial_anchors(self) -> torch.Tensor:
        return self.anchor_history[0]

    @property
    def final_anchors(self) -> torch.Tensor:
        return self.anchor_history[-1]

    def final_boxes(self) -> torch.Tensor:
        """Absolute 10-vectors from the last layer."""
        return absolute_boxes(self.layer_reg[-1], self.layer_anchors[-1])


class Detector(nn.Module):
    """Backbone + FPS anchors + K-layer decoder with query refinement."""

    def __init__(self, grid_cfg: GridConfig, cfg: DecoderConfig, seed: int = 0):
        super().__init__()
        if grid_cfg.d != cfg.d:
            raise ConfigError("backbone and decoder dimensions disagree")
        self.cfg = cfg
        self.grid_cfg = grid_cfg
        self.backbone = PillarBackbone(grid_cfg)
        self.anchor_encoder = AnchorEncoder(cfg.d, grid_cfg.extent, seed=seed)
        self.layers = nn.ModuleList(DecoderLayer(cfg) for _ in range(cfg.k_layers))
        self.head = EstimationHead(cfg.d, cfg.num_classes)
        self.aam = AnchorAlignment(cfg.d)

    def decoder_forward(
        self,
        memory: torch.Tensor,
        anchors: torch.Tensor,
        refine_layers: frozenset[int] | None = None,
        memory_mask: torch.Tensor | None = None,
    ) -> DecoderOutput:
        """Run all K layers. memory (B, N, d), anchors (B, M, 3)."""
        s_r = (
            self.cfg.refine_layers
            if refine_layers is None
            else validate_refine_layers(refine_layers, self.cfg.k_layers)
        )
        if anchors.shape[-2] != self.cfg.m_queries:
            raise ConfigError(
                f"expected {self.cfg.m_queries} anchors, got {anchors.shape[-2]}"
            )
        if not self.cfg.mask_empty_cells:
            memory_mask = None

        cur_anchor = anchors
        cur_encoding = self.anchor_encoder(cur_anchor)  # y^(0)
        aux_reg, aux_logits = self.head(cur_encoding)

        out = DecoderOutput(
            layer_tokens=[], layer_anchors=[], layer_encodings=[],
            layer_reg=[], layer_logits=[],
            aux_reg=aux_reg, aux_logits=aux_logits,
            cross_attention=[], anchor_history=[cur_anchor],
        )
        z = None
        for k in range(self.cfg.k_layers):
            if k == 0:
                y_k = cur_encoding
            elif k in s_r:
                # Move each anchor onto its current box-center estimate,
                # re-encode, and re-align the propagated token.
                deltas = out.layer_reg[k - 1][..., 0:3]
                cur_anchor = cur_anchor + deltas
                cur_encoding = self.anchor_encoder(cur_anchor)
                out.anchor_history.append(cur_anchor)
                y_k = self.aam(z) + cur_encoding
            else:
                # Propagation: the latest anchor encoding is re-added as is.
                y_k = z + cur_encoding
            z, cross_w = self.layers[k](y_k, memory, memory_mask=memory_mask)
            reg, logits = self.head(z)
            out.layer_tokens.append(z)
            out.layer_anchors.append(cur_anchor)
            out.layer_encodings.append(cur_encoding)
            out.layer_reg.append(reg)
            out.layer_logits.append(logits)
            out.cross_attention.append(cross_w)
        return out

    def forward_scene_batch(
        self,
        pillar_feats: torch.Tensor,
        pillar_masks: torch.Tensor,
        anchors: torch.Tensor,
        refine_layers: frozenset[int] | None = None,
    ) -> DecoderOutput:
        """Batched pipeline from precomputed pillar tensors.

        pillar_feats (B, N, P, 6), pillar_masks (B, N, P), anchors (B, M, 3).
        """
        tokens = self.backbone.forward_batch(pillar_feats, pillar_masks)
        nonempty = pillar_masks.any(dim=-1)
        return self.decoder_forward(
            tokens, anchors, refine_layers=refine_layers, memory_mask=nonempty
        )

    def run_scene(
        self,
        scene: Scene,
        refine_layers: frozenset[int] | None = None,
        fps_start: int = 0,
        pillar_seed: int = 0,
    ) -> DecoderOutput:
        pillars = pillarize(scene, self.grid_cfg, seed=pillar_seed)
        anchor_set = farthest_point_sample(
            scene.points, self.cfg.m_queries, start_index=fps_start
        )
        dtype = self.head.reg.weight.dtype
        anchors = torch.from_numpy(anchor_set.locations).to(dtype)
        return self.forward_scene_batch(
            pillars.features[None].to(dtype),
            pillars.point_mask[None],
            anchors[None],
            refine_layers=refine_layers,
        )

    @torch.no_grad()
    def detect(
        self,
        scene: Scene,
        refine_layers: frozenset[int] | None = None,
        fps_start: int = 0,
    ) -> list[Detection]:
        """Boxes whose argmax class is a real class; score = its softmax prob."""
        out = self.run_scene(scene, refine_layers=refine_layers, fps_start=fps_start)
        boxes = out.final_boxes()[0]  # (M, 10)
        probs = torch.softmax(out.layer_logits[-1][0], dim=-1)
        cls = probs.argmax(dim=-1)
        first = out.initial_anchors[0]
        latest = out.final_anchors[0]
        detections = []
        for i in range(self.cfg.m_queries):
            c = int(cls[i])
            if c == self.cfg.num_classes:  # 'no-object'
                continue
            b = boxes[i]
            center = b[0:3].numpy().astype(np.float64)
            yaw = float(decode_yaw(b[6], b[7]))
            detections.append(
                Detection(
                    center=center,
                    size=b[3:6].numpy().astype(np.float64),
                    yaw=yaw,
                    vx=float(b[8]),
                    vy=float(b[9]),
                    class_id=c,
                    score=float(probs[i, c]),
                    query_index=i,
                    fq_travel=float(np.hypot(*(center[:2] - first[i, :2].numpy()))),
                    lq_travel=float(np.hypot(*(center[:2] - latest[i, :2].numpy()))),
                )
            )
        return detections


def export_attention_maps(
    out: DecoderOutput,
    grid_cfg: GridConfig,
    query_index: int,
    out_dir,
    batch_index: int = 0,
) -> list[str]:
    """Write one text file per layer for the given query.

    Each file lists `CELL row col weight` (head-averaged cross-attention)
    plus the query's anchor and decoded absolute box at that layer.
    """
    os.makedirs(out_dir, exist_ok=True)
    h, w = grid_cfg.grid_dims
    paths = []
    for k, attn in enumerate(out.cross_attention):
        weights = attn[batch_index, :, query_index, :].mean(dim=0)  # (N,)
        anchor = out.layer_anchors[k][batch_index, query_index]
        box = absolute_boxes(
            out.layer_reg[k][batch_index], out.layer_anchors[k][batch_index]
        )[query_index]
        path = os.path.join(out_dir, f"attention_layer{k}_query{query_index}.txt")
        with open(path, "w") as fh:
            fh.write(f"ANCHOR {anchor[0]:.6f} {anchor[1]:.6f} {anchor[2]:.6f}\n")
            fh.write("BOX " + " ".join(f"{v:.6f}" for v in box.tolist()) + "\n")
            for idx in range(h * w):
                fh.write(f"CELL {idx // w} {idx % w} {float(weights[idx]):.8f}\n")
        paths.append(path)
    return paths
