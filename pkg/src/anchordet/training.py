"""Set-prediction training: Hungarian matching against ground truth,
'no-object' padding, per-layer auxiliary losses, the staged training loop,
and the separate alignment-module training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .backbone import GridConfig, pillarize
from .decoder import Detector, DecoderConfig, DecoderOutput, absolute_boxes
from .sampling import farthest_point_sample
from .scene import Scene


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]  # (gt_index, query_index), sorted by gt
    unmatched_queries: tuple[int, ...]
    total_cost: float


def hungarian_match(cost: np.ndarray) -> MatchResult:
    """Minimum-cost assignment of every ground-truth row to a distinct query column."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2-D matrix")
    g, m = cost.shape
    if g > m:
        raise ValueError(f"more ground-truth boxes ({g}) than queries ({m})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    order = np.argsort(rows)
    pairs = tuple((int(rows[i]), int(cols[i])) for i in order)
    matched = {q for _, q in pairs}
    unmatched = tuple(q for q in range(m) if q not in matched)
    return MatchResult(pairs, unmatched, float(cost[rows, cols].sum()))


def build_cost_matrix(
    gt_vectors: np.ndarray,
    gt_classes: np.ndarray,
    pred_boxes: np.ndarray,
    pred_logits: np.ndarray,
    lambda_reg: float = 1.0,
    lambda_cls: float = 1.0,
) -> np.ndarray:
    """(G, M) matching cost: l1 distance of absolute 10-vectors plus
    (1 - softmax probability of the ground-truth class)."""
    g = len(gt_vectors)
    if g == 0:
        return np.zeros((0, len(pred_boxes)))
    l1 = np.abs(gt_vectors[:, None, :] - pred_boxes[None, :, :]).sum(axis=-1)
    z = pred_logits - pred_logits.max(axis=-1, keepdims=True)
    probs = np.exp(z) / np.exp(z).sum(axis=-1, keepdims=True)
    cls_cost = 1.0 - probs[:, gt_classes].T  # (G, M)
    return lambda_reg * l1 + lambda_cls * cls_cost


@dataclass
class LossBreakdown:
    """Per-layer loss terms; entry 0 is the pre-layer-0 auxiliary head."""

    regression: list[torch.Tensor]
    classification: list[torch.Tensor]
    total: torch.Tensor


@dataclass(frozen=True)
class TrainConfig:
    epochs_stage1: int = 80
    epochs_aam: int = 20
    epochs_stage2: int = 80
    lr: float = 1e-4
    lr_decay_factor: float = 10.0
    lr_decay_period: int = 200  # epochs between rate drops
    batch_size: int = 10
    lambda_reg: float = 1.0
    lambda_cls: float = 1.0
    noobject_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0 or self.lr_decay_factor <= 0 or self.lr_decay_period <= 0:
            raise ValueError("learning rates and periods must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay_factor ** (-(epoch // self.lr_decay_period))


@dataclass
class SceneExample:
    """A scene preprocessed for training: pillar tensors, FPS anchors, targets."""

    pillar_features: torch.Tensor  # (N, P, 6)
    pillar_mask: torch.Tensor  # (N, P)
    anchors: torch.Tensor  # (M, 3)
    gt_vectors: np.ndarray  # (G, 10)
    gt_classes: np.ndarray  # (G,)


def prepare_example(scene: Scene, grid_cfg: GridConfig, m_queries: int) -> SceneExample:
    pillars = pillarize(scene, grid_cfg)
    anchor_set = farthest_point_sample(scene.points, m_queries)
    gt_vec = (
        np.stack([b.as_vector() for b in scene.boxes])
        if scene.boxes
        else np.zeros((0, 10))
    )
    gt_cls = np.array([b.class_id for b in scene.boxes], dtype=np.int64)
    return SceneExample(
        pillar_features=pillars.features,
        pillar_mask=pillars.point_mask,
        anchors=torch.from_numpy(anchor_set.locations).float(),
        gt_vectors=gt_vec,
        gt_classes=gt_cls,
    )


def _layer_loss(
    reg: torch.Tensor,
    logits: torch.Tensor,
    anchors: torch.Tensor,
    gt_vectors: np.ndarray,
    gt_classes: np.ndarray,
    cfg: TrainConfig,
    num_classes: int,
):
    """Match one layer's M outputs against the scene's ground truth."""
    boxes = absolute_boxes(reg, anchors)  # (M, 10)
    m = boxes.shape[0]
    targets = torch.full((m,), num_classes, dtype=torch.long)
    if len(gt_vectors) > 0:
        cost = build_cost_matrix(
            gt_vectors, gt_classes,
            boxes.detach().cpu().numpy(), logits.detach().cpu().numpy(),
            cfg.lambda_reg, cfg.lambda_cls,
        )
        match = hungarian_match(cost)
        gt_idx = torch.tensor([g for g, _ in match.pairs], dtype=torch.long)
        q_idx = torch.tensor([q for _, q in match.pairs], dtype=torch.long)
        gt_t = torch.from_numpy(gt_vectors).to(boxes.dtype)
        reg_loss = torch.abs(boxes[q_idx] - gt_t[gt_idx]).mean()
        targets[q_idx] = torch.from_numpy(gt_classes[gt_idx.numpy()])
    else:
        reg_loss = boxes.new_zeros(())
    weights = torch.ones(num_classes + 1, dtype=logits.dtype)
    weights[num_classes] = cfg.noobject_weight
    cls_loss = F.cross_entropy(logits, targets, weight=weights)
    return reg_loss, cls_loss


def set_loss(
    out: DecoderOutput,
    gt_vectors: np.ndarray,
    gt_classes: np.ndarray,
    cfg: TrainConfig,
    num_classes: int,
    batch_index: int = 0,
) -> LossBreakdown:
    """Hungarian-matched loss over all layers plus the pre-layer-0 head.

    Each layer is matched independently on its own (detached) outputs.
    """
    reg_terms, cls_terms = [], []
    stages = [(out.aux_reg, out.aux_logits, out.initial_anchors)]
    stages += list(zip(out.layer_reg, out.layer_logits, out.layer_anchors))
    for reg, logits, anchors in stages:
        r, c = _layer_loss(
            reg[batch_index], logits[batch_index], anchors[batch_index],
            gt_vectors, gt_classes, cfg, num_classes,
        )
        reg_terms.append(r)
        cls_terms.append(c)
    total = sum(cfg.lambda_reg * r + cfg.lambda_cls * c
                for r, c in zip(reg_terms, cls_terms))
    return LossBreakdown(reg_terms, cls_terms, total)


def batch_loss(
    model: Detector,
    examples: list[SceneExample],
    cfg: TrainConfig,
    refine_layers: frozenset[int],
) -> tuple[torch.Tensor, float, float]:
    """Mean loss over a batch of scenes; returns (total, reg part, cls part)."""
    feats = torch.stack([e.pillar_features for e in examples])
    masks = torch.stack([e.pillar_mask for e in examples])
    anchors = torch.stack([e.anchors for e in examples])
    out = model.forward_scene_batch(feats, masks, anchors, refine_layers=refine_layers)
    totals, regs, clss = [], 0.0, 0.0
    for i, ex in enumerate(examples):
        br = set_loss(out, ex.gt_vectors, ex.gt_classes, cfg,
                      model.cfg.num_classes, batch_index=i)
        totals.append(br.total)
        regs += sum(float(r.detach()) for r in br.regression)
        clss += sum(float(c.detach()) for c in br.classification)
    total = torch.stack(totals).mean()
    return total, regs / len(examples), clss / len(examples)


def train_stage(
    model: Detector,
    examples: list[SceneExample],
    cfg: TrainConfig,
    *,
    epochs: int,
    refine_layers: frozenset[int],
    stage_name: str,
    log_rows: list[dict] | None = None,
) -> list[dict]:
    """Run one optimization stage; the AAM is always excluded from updates."""
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    for p in model.aam.parameters():
        p.requires_grad_(False)
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.lr)
    rows = log_rows if log_rows is not None else []
    order = np.arange(len(examples))
    for epoch in range(epochs):
        lr = cfg.lr_at(epoch)
        for group in opt.param_groups:
            group["lr"] = lr
        rng.shuffle(order)
        ep_total = ep_reg = ep_cls = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [examples[i] for i in order[start:start + cfg.batch_size]]
            total, reg, cls = batch_loss(model, batch, cfg, refine_layers)
            if not torch.isfinite(total):
                raise RuntimeError(
                    f"training diverged: non-finite loss at stage {stage_name}, "
                    f"epoch {epoch}"
                )
            if lr > 0:
                opt.zero_grad()
                total.backward()
                opt.step()
            ep_total += float(total.detach())
            ep_reg += reg
            ep_cls += cls
            n_batches += 1
        rows.append({
            "epoch": epoch,
            "lr": lr,
            "loss_total": ep_total / n_batches,
            "loss_reg": ep_reg / n_batches,
            "loss_cls": ep_cls / n_batches,
            "stage": stage_name,
        })
    for p in model.aam.parameters():
        p.requires_grad_(True)
    return rows


def train_detector(
    scenes: list[Scene],
    grid_cfg: GridConfig,
    dec_cfg: DecoderConfig,
    cfg: TrainConfig,
) -> tuple[Detector, list[dict]]:
    """Stage 1: train a fresh detector with pure propagation (no refinement)."""
    torch.manual_seed(cfg.seed)
    model = Detector(grid_cfg, dec_cfg, seed=cfg.seed)
    examples = [prepare_example(s, grid_cfg, dec_cfg.m_queries) for s in scenes]
    log = train_stage(
        model, examples, cfg,
        epochs=cfg.epochs_stage1, refine_layers=frozenset(), stage_name="stage1",
    )
    return model, log


def continue_with_refinement(
    model: Detector,
    scenes: list[Scene],
    cfg: TrainConfig,
    refine_layers: frozenset[int],
    log_rows: list[dict] | None = None,
) -> list[dict]:
    """Stage 2: fine-tune with query refinement enabled and the AAM frozen."""
    examples = [prepare_example(s, model.grid_cfg, model.cfg.m_queries) for s in scenes]
    return train_stage(
        model, examples, cfg,
        epochs=cfg.epochs_stage2, refine_layers=refine_layers,
        stage_name="stage2", log_rows=log_rows,
    )


def collect_tokens(
    model: Detector, scenes: list[Scene], limit: int | None = None
) -> torch.Tensor:
    """Decoder output tokens from all layers under pure propagation."""
    chunks = []
    with torch.no_grad():
        for scene in scenes:
            out = model.run_scene(scene, refine_layers=frozenset())
            for z in out.layer_tokens:
                chunks.append(z.reshape(-1, model.cfg.d))
    tokens = torch.cat(chunks)
    return tokens[:limit] if limit is not None else tokens


def train_aam(
    model: Detector,
    scenes: list[Scene],
    cfg: TrainConfig,
    batch_size: int = 256,
) -> list[dict]:
    """Train the alignment module on tokens from a propagation-trained model.

    Targets in head-output space: location deltas of head(AAM(z)) go to
    zero, everything else must reproduce head(z). Only AAM weights move.
    """
    tokens = collect_tokens(model, scenes)
    with torch.no_grad():
        tgt_reg, tgt_logits = model.head(tokens)
        tgt_reg = tgt_reg.clone()
        tgt_reg[:, 0:3] = 0.0
    for p in model.parameters():
        p.requires_grad_(False)
    for p in model.aam.parameters():
        p.requires_grad_(True)
    opt = torch.optim.Adam(model.aam.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    order = np.arange(len(tokens))
    rows = []
    for epoch in range(cfg.epochs_aam):
        rng.shuffle(order)
        ep_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), batch_size):
            idx = torch.from_numpy(order[start:start + batch_size].copy())
            reg, logits = model.head(model.aam(tokens[idx]))
            loss = (
                torch.abs(reg - tgt_reg[idx]).mean()
                + torch.abs(logits - tgt_logits[idx]).mean()
            )
            if not torch.isfinite(loss):
                raise RuntimeError(f"AAM training diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep_loss += float(loss.detach())
            n_batches += 1
        rows.append({
            "epoch": epoch, "lr": cfg.lr, "loss_total": ep_loss / n_batches,
            "loss_reg": ep_loss / n_batches, "loss_cls": 0.0, "stage": "aam",
        })
    for p in model.parameters():
        p.requires_grad_(True)
    return rows


def write_training_log(path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,lr,loss_total,loss_reg,loss_cls,stage\n")
        for r in rows:
            fh.write(
                f"{r['epoch']},{r['lr']:.8g},{r['loss_total']:.8g},"
                f"{r['loss_reg']:.8g},{r['loss_cls']:.8g},{r['stage']}\n"
            )
