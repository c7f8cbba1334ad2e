"""Detection metrics (AP / ATE / ASE / AOE), oriented BEV IoU, greedy NMS,
and the query travel-length diagnostics.

Metric conventions follow the nuScenes protocol: center-distance matching
at {0.5, 1, 2, 4} m, precision/recall clipped at 0.1, and true-positive
error terms taken at the 2 m threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from shapely.geometry import Polygon

from .decoder import Detection
from .scene import GroundTruthBox, Scene

DIST_THRESHOLDS = (0.5, 1.0, 2.0, 4.0)
TP_THRESHOLD = 2.0
MIN_RECALL = 0.1
MIN_PRECISION = 0.1


@dataclass
class DetectionRecord:
    """One detection tied to its scene, with travel diagnostics."""

    scene_id: int
    detection: Detection
    matched_gt: int | None = None  # gt index at the TP threshold
    location_error: float | None = None  # BEV center distance when matched


@dataclass
class MetricsReport:
    ap: float
    ate: float
    ase: float
    aoe: float
    ap_per_threshold: dict[float, float]
    num_detections: int
    num_gt: int


def bev_corners(cx, cy, width, length, yaw) -> np.ndarray:
    """(4, 2) corners of a yawed BEV rectangle; width along x, length along y
    in the box frame."""
    c, s = math.cos(yaw), math.sin(yaw)
    dx, dy = width / 2.0, length / 2.0
    local = np.array([[dx, dy], [-dx, dy], [-dx, -dy], [dx, -dy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def _bev_polygon(box) -> Polygon:
    if isinstance(box, GroundTruthBox):
        return Polygon(bev_corners(box.cx, box.cy, box.width, box.length, box.yaw))
    return Polygon(
        bev_corners(box.center[0], box.center[1], box.size[0], box.size[1], box.yaw)
    )


def oriented_bev_iou(a, b) -> float:
    """Intersection over union of two yawed BEV rectangles (polygon clipping)."""
    pa, pb = _bev_polygon(a), _bev_polygon(b)
    if pa.area <= 0 or pb.area <= 0:
        return 0.0
    inter = pa.intersection(pb).area
    union = pa.area + pb.area - inter
    return inter / union if union > 0 else 0.0


def aligned_3d_iou(det: Detection, gt: GroundTruthBox) -> float:
    """3D IoU after aligning centers and yaw: only the extents differ."""
    dims_a = np.maximum(np.asarray(det.size, dtype=np.float64), 1e-9)
    dims_b = np.array([gt.width, gt.length, gt.height])
    inter = float(np.minimum(dims_a, dims_b).prod())
    union = float(dims_a.prod() + dims_b.prod() - inter)
    return inter / union


def nms(detections: list[Detection], min_overlap: float) -> list[Detection]:
    """Greedy suppression of same-class detections by BEV IoU."""
    remaining = sorted(detections, key=lambda d: -d.score)
    kept: list[Detection] = []
    while remaining:
        best = remaining.pop(0)
        kept.append(best)
        remaining = [
            d for d in remaining
            if d.class_id != best.class_id or oriented_bev_iou(best, d) <= min_overlap
        ]
    return kept


def match_detections(
    records: list[DetectionRecord],
    gt_by_scene: dict[int, list[GroundTruthBox]],
    thresholds=DIST_THRESHOLDS,
) -> dict[float, list[tuple[int, int | None, float]]]:
    """Greedy score-ordered matching per center-distance threshold.

    Returns, per threshold, one (record_index, gt_index or None, distance)
    entry per detection in descending score order; gt_index None marks a
    false positive.
    """
    order = sorted(range(len(records)), key=lambda i: -records[i].detection.score)
    result: dict[float, list[tuple[int, int | None, float]]] = {}
    for thr in thresholds:
        taken: set[tuple[int, int]] = set()
        rows = []
        for i in order:
            rec = records[i]
            det = rec.detection
            best_gt, best_dist = None, math.inf
            for g, gt in enumerate(gt_by_scene.get(rec.scene_id, [])):
                if gt.class_id != det.class_id or (rec.scene_id, g) in taken:
                    continue
                dist = math.hypot(det.center[0] - gt.cx, det.center[1] - gt.cy)
                if dist <= thr and dist < best_dist:
                    best_gt, best_dist = g, dist
            if best_gt is not None:
                taken.add((rec.scene_id, best_gt))
                rows.append((i, best_gt, best_dist))
            else:
                rows.append((i, None, math.inf))
        result[thr] = rows
    return result


def _average_precision(matches, num_gt: int) -> float:
    """nuScenes-style normalized AP from score-ordered match rows."""
    if num_gt == 0:
        return 0.0
    tp = np.cumsum([1 if g is not None else 0 for _, g, _ in matches])
    fp = np.cumsum([0 if g is not None else 1 for _, g, _ in matches])
    if len(tp) == 0:
        return 0.0
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    rec_interp = np.linspace(0.0, 1.0, 101)
    prec = np.interp(rec_interp, recall, precision, right=0.0)
    prec = prec[rec_interp > MIN_RECALL]
    prec = np.clip(prec - MIN_PRECISION, 0.0, 1.0)
    return float(prec.mean() / (1.0 - MIN_PRECISION))


def compute_metrics(
    records: list[DetectionRecord],
    gt_by_scene: dict[int, list[GroundTruthBox]],
    thresholds=DIST_THRESHOLDS,
) -> tuple[MetricsReport, list[DetectionRecord]]:
    """Full report plus records annotated with their 2 m-threshold matches."""
    num_gt = sum(len(v) for v in gt_by_scene.values())
    matches = match_detections(records, gt_by_scene, thresholds)
    ap_per_thr = {thr: _average_precision(matches[thr], num_gt) for thr in thresholds}
    ap = float(np.mean(list(ap_per_thr.values()))) if ap_per_thr else 0.0

    annotated = [replace(r) for r in records]
    trans, scale, orient = [], [], []
    for i, g, dist in matches[TP_THRESHOLD]:
        if g is None:
            continue
        rec = annotated[i]
        gt = gt_by_scene[rec.scene_id][g]
        rec.matched_gt = g
        rec.location_error = dist
        trans.append(dist)
        scale.append(1.0 - aligned_3d_iou(rec.detection, gt))
        diff = abs(rec.detection.yaw - gt.yaw) % (2 * math.pi)
        orient.append(min(diff, 2 * math.pi - diff))
    if trans:
        ate, ase, aoe = map(lambda v: float(np.mean(v)), (trans, scale, orient))
    else:
        ate = ase = aoe = 1.0  # worst case when nothing is detected
    report = MetricsReport(
        ap=ap, ate=ate, ase=ase, aoe=aoe,
        ap_per_threshold=ap_per_thr,
        num_detections=len(records), num_gt=num_gt,
    )
    return report, annotated


def evaluate_detector(
    model, scenes: list[Scene], refine_layers=None, nms_overlap: float | None = None
) -> tuple[MetricsReport, list[DetectionRecord]]:
    """Run detection over scenes and score it; optional NMS preprocessing."""
    records: list[DetectionRecord] = []
    gt_by_scene: dict[int, list[GroundTruthBox]] = {}
    for sid, scene in enumerate(scenes):
        dets = model.detect(scene, refine_layers=refine_layers)
        if nms_overlap is not None:
            dets = nms(dets, nms_overlap)
        gt_by_scene[sid] = list(scene.boxes)
        records.extend(DetectionRecord(scene_id=sid, detection=d) for d in dets)
    return compute_metrics(records, gt_by_scene)


@dataclass
class TravelBin:
    lo: float
    hi: float
    median: float
    q25: float
    q75: float
    count: int


@dataclass
class TravelStats:
    bins: list[TravelBin]  # location error vs FQ travel length
    lq_hist_edges: np.ndarray
    lq_hist_counts: np.ndarray
    fq_lengths: np.ndarray
    lq_lengths: np.ndarray


def travel_length_stats(
    records: list[DetectionRecord], bin_width: float = 4.0
) -> TravelStats:
    """Binned location-error quartiles over FQ travel length, plus the LQ
    travel-length histogram. Uses matched (true positive) records only."""
    tps = [r for r in records if r.location_error is not None]
    fq = np.array([r.detection.fq_travel for r in tps])
    lq = np.array([r.detection.lq_travel for r in tps])
    err = np.array([r.location_error for r in tps])

    bins: list[TravelBin] = []
    if len(fq) > 0:
        n_bins = int(np.floor(fq.max() / bin_width)) + 1
        for b in range(n_bins):
            lo, hi = b * bin_width, (b + 1) * bin_width
            sel = err[(fq >= lo) & (fq < hi)]
            if len(sel) == 0:
                continue  # empty bins are absent
            bins.append(TravelBin(
                lo=lo, hi=hi,
                median=float(np.percentile(sel, 50)),
                q25=float(np.percentile(sel, 25)),
                q75=float(np.percentile(sel, 75)),
                count=len(sel),
            ))
        n_lq = int(np.floor(lq.max() / bin_width)) + 1
        edges = np.arange(n_lq + 1) * bin_width
        counts, _ = np.histogram(lq, bins=edges)
    else:
        edges = np.array([0.0, bin_width])
        counts = np.array([0])
    return TravelStats(bins, edges, counts, fq, lq)


def write_metrics_csv(path, rows: list[tuple[str, MetricsReport]]) -> None:
    with open(path, "w") as fh:
        fh.write("method,AP,ATE,ASE,AOE\n")
        for method, rep in rows:
            fh.write(f"{method},{rep.ap:.6f},{rep.ate:.6f},{rep.ase:.6f},{rep.aoe:.6f}\n")


def write_travel_csv(path, stats: TravelStats) -> None:
    hist = {
        (float(stats.lq_hist_edges[i]), float(stats.lq_hist_edges[i + 1])): int(c)
        for i, c in enumerate(stats.lq_hist_counts)
    }
    with open(path, "w") as fh:
        fh.write("bin_lo,bin_hi,median,q25,q75,hist_count_LQ\n")
        seen = set()
        for b in stats.bins:
            lq_count = hist.get((b.lo, b.hi), 0)
            seen.add((b.lo, b.hi))
            fh.write(f"{b.lo:g},{b.hi:g},{b.median:.6f},{b.q25:.6f},{b.q75:.6f},{lq_count}\n")
        for (lo, hi), c in hist.items():
            if (lo, hi) not in seen and c > 0:
                fh.write(f"{lo:g},{hi:g},,,,{c}\n")


def plot_travel_stats(path, stats: TravelStats) -> None:
    """Median location error vs FQ travel length with quartile bars, and the
    LQ travel-length histogram, written as a static SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    if stats.bins:
        xs = [(b.lo + b.hi) / 2 for b in stats.bins]
        med = [b.median for b in stats.bins]
        lo = [b.median - b.q25 for b in stats.bins]
        hi = [b.q75 - b.median for b in stats.bins]
        ax.errorbar(xs, med, yerr=[lo, hi], fmt="o-", capsize=3,
                    label="location error (FQ)")
    ax2 = ax.twinx()
    centers = (stats.lq_hist_edges[:-1] + stats.lq_hist_edges[1:]) / 2
    total = max(stats.lq_hist_counts.sum(), 1)
    ax2.bar(centers, stats.lq_hist_counts / total,
            width=0.9 * np.diff(stats.lq_hist_edges), alpha=0.3, color="gray",
            label="histogram (LQ)")
    ax.set_xlabel("Query travel length [m]")
    ax.set_ylabel("Location error [m]")
    ax2.set_ylabel("Relative frequency")
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_metrics(path, rows: list[tuple[str, MetricsReport]]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    methods = [m for m, _ in rows]
    ax.bar(methods, [r.ap for _, r in rows], color="tab:blue")
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1)
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
