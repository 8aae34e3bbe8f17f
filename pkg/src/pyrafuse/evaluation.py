"""COCO-style average precision / average recall for boxes and masks.

Protocol: 10 IoU thresholds 0.50:0.05:0.95, 101 recall sample points, max
detections {1, 10, 100}, area ranges {all, small = [0, 32^2)}. Matching is
greedy per (image, category): detections in descending score order each take
the not-yet-matched ground truth with the highest IoU at or above the
threshold. Ground truths outside the area range are ignored (matching one
ignores the detection); unmatched detections outside the range are ignored
too. AP is the mean over thresholds and categories of 101-point-sampled
precision envelopes; AR is the mean over thresholds and categories of the
final recall. Cells with no countable ground truth stay at the sentinel -1
and are excluded from means.

Scores are pooled across images with stable sorts so ties cannot reorder
between runs; truncation to max detections happens per image and category.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError
from .scenes import rasterize_mask


def _iou_thresholds() -> tuple[float, ...]:
    n = int(np.round((0.95 - 0.5) / 0.05)) + 1
    return tuple(float(t) for t in np.linspace(0.5, 0.95, n))


def _recall_points() -> tuple[float, ...]:
    return tuple(float(r) for r in np.linspace(0.0, 1.0, 101))


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = field(default_factory=_iou_thresholds)
    recall_points: tuple[float, ...] = field(default_factory=_recall_points)
    max_dets: tuple[int, ...] = (1, 10, 100)
    # name -> [lo, hi): half-open, so area == 32^2 is not small
    area_ranges: tuple[tuple[str, float, float], ...] = (
        ("all", 0.0, float("inf")),
        ("small", 0.0, float(32 * 32)),
    )


@dataclass
class EvalSummary:
    ap: float = -1.0
    ap50: float = -1.0
    ap75: float = -1.0
    ap_small: float = -1.0
    ar_1: float = -1.0
    ar_10: float = -1.0
    ar_100: float = -1.0
    ar_small: float = -1.0

    def to_dict(self) -> dict:
        return {"AP": self.ap, "AP50": self.ap50, "AP75": self.ap75,
                "AP_S": self.ap_small, "AR_1": self.ar_1, "AR_10": self.ar_10,
                "AR_100": self.ar_100, "AR_S": self.ar_small}


def box_iou(a, b) -> float:
    """IoU of two xywh boxes."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0.0 else 0.0


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """IoU of two boolean masks of identical shape."""
    if a.shape != b.shape:
        raise UsageError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.logical_and(a, b).sum())
    union = int(np.logical_or(a, b).sum())
    return inter / union if union else 0.0


@dataclass
class MatchResult:
    order: list[int]  # detection indices sorted by descending score
    det_match: list[int]  # per sorted detection: matched gt index or -1
    gt_match: list[int]  # per gt: sorted-detection index or -1


def _greedy_match(iou: np.ndarray, thresh: float,
                  gt_ignore: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Core greedy loop. iou rows are score-ordered dets; gt columns must be
    sorted ignored-last. A det takes the highest-IoU free gt at or above the
    threshold (preferring any countable gt over ignored ones)."""
    n_det, n_gt = iou.shape
    det_match = np.full(n_det, -1, dtype=np.int64)
    gt_match = np.full(n_gt, -1, dtype=np.int64)
    det_ignore = np.zeros(n_det, dtype=bool)
    for d in range(n_det):
        best = min(thresh, 1.0 - 1e-10)
        m = -1
        for g in range(n_gt):
            if gt_match[g] >= 0:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break  # countable candidates exhausted; don't trade down
            if iou[d, g] < best:
                continue
            best = iou[d, g]
            m = g
        if m == -1:
            continue
        det_ignore[d] = bool(gt_ignore[m])
        det_match[d] = m
        gt_match[m] = d
    return det_match, gt_match, det_ignore


def match_greedy(dets, gts, iou_fn, iou_thresh: float) -> MatchResult:
    """Match one image-category's detections to ground truths (no ignores).

    `dets` need a .score or ['score']; `iou_fn(det, gt) -> float`.
    """
    def score(d):
        return d["score"] if isinstance(d, dict) else d.score

    order = sorted(range(len(dets)), key=lambda i: -score(dets[i]))
    iou = np.zeros((len(dets), len(gts)))
    for row, di in enumerate(order):
        for g, gt in enumerate(gts):
            iou[row, g] = iou_fn(dets[di], gt)
    det_match, gt_match, _ = _greedy_match(iou, iou_thresh, np.zeros(len(gts), dtype=bool))
    return MatchResult(order=list(order), det_match=det_match.tolist(),
                       gt_match=gt_match.tolist())


def pr_curve(matches: np.ndarray, n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision/recall along a score-ordered match vector.

    matches: int array, +1 true positive, -1 false positive, 0 ignored
    (ignored entries advance neither count). n_gt counts countable gts.
    """
    m = np.asarray(matches)
    tp = np.cumsum(m == 1, dtype=np.float64)
    fp = np.cumsum(m == -1, dtype=np.float64)
    rc = tp / n_gt
    pr = tp / (tp + fp + np.spacing(1))
    return pr, rc


def average_precision(pr: np.ndarray, rc: np.ndarray, recall_points) -> float:
    """Right-to-left precision envelope sampled at the recall points
    (first index with recall >= point); points beyond max recall score 0."""
    return float(_sample_precision(pr, rc, recall_points).mean())


def average_recall(matches_per_threshold: np.ndarray, n_gt: int) -> float:
    """Mean over thresholds of the fraction of countable gts matched."""
    m = np.asarray(matches_per_threshold)
    if n_gt <= 0:
        return -1.0
    if m.size == 0:
        return 0.0
    return float(np.mean((m == 1).sum(axis=1) / n_gt))


class _ImageCatRecord:
    """Match bookkeeping for one (category, area range, image)."""

    __slots__ = ("scores", "matched", "ignored", "n_countable_gt")

    def __init__(self, scores, matched, ignored, n_countable_gt):
        self.scores = scores  # [D] descending
        self.matched = matched  # [T, D] bool
        self.ignored = ignored  # [T, D] bool
        self.n_countable_gt = n_countable_gt


@dataclass
class EvalResult:
    task: str
    config: EvalConfig
    summary: EvalSummary
    per_category: list[dict]
    precision: np.ndarray  # [T, R, K, A, M]
    recall: np.ndarray  # [T, K, A, M]


def _det_sort_key(i: int, det: dict) -> tuple:
    return (-det["score"], i)


def _polygon_mask(cache: dict, key, segmentation, height: int, width: int) -> np.ndarray:
    got = cache.get(key)
    if got is None:
        poly = np.asarray(segmentation[0], dtype=np.float64).reshape(-1, 2)
        got = rasterize_mask(poly, height, width)
        cache[key] = got
    return got


def evaluate(ground_truth: list[dict], detections: list[dict], images: list[dict],
             categories: list[dict], config: EvalConfig | None = None,
             task: str = "box") -> EvalResult:
    """Full evaluation over COCO-style dicts.

    ground_truth: {id, image_id, category_id, bbox, area, segmentation}
    detections:   {image_id, category_id, bbox, score, segmentation?}
    images:       {id, width, height}   categories: {id, name}
    """
    if task not in ("box", "mask"):
        raise UsageError(f"task must be 'box' or 'mask', got {task!r}")
    cfg = config or EvalConfig()
    thresholds = np.asarray(cfg.iou_thresholds)
    n_t, n_r = len(thresholds), len(cfg.recall_points)
    cat_ids = [c["id"] for c in categories]
    n_k, n_a, n_m = len(cat_ids), len(cfg.area_ranges), len(cfg.max_dets)
    max_cap = max(cfg.max_dets)
    image_order = [img["id"] for img in images]
    image_size = {img["id"]: (img["height"], img["width"]) for img in images}

    gts_by: dict[tuple, list[dict]] = {}
    for g in ground_truth:
        gts_by.setdefault((g["image_id"], g["category_id"]), []).append(g)
    dets_by: dict[tuple, list[dict]] = {}
    for d in detections:
        dets_by.setdefault((d["image_id"], d["category_id"]), []).append(d)

    mask_cache: dict = {}

    def det_geometry(key, det, hw):
        if task == "box":
            bb = det["bbox"]
            return det["bbox"], float(bb[2]) * float(bb[3])
        m = _polygon_mask(mask_cache, key, det["segmentation"], *hw)
        return m, float(m.sum())

    def gt_geometry(gt, hw):
        if task == "box":
            return gt["bbox"]
        return _polygon_mask(mask_cache, ("gt", gt["id"]), gt["segmentation"], *hw)

    # records[k][a] -> list over images
    records: list[list[list[_ImageCatRecord]]] = [
        [[] for _ in range(n_a)] for _ in range(n_k)]
    for ki, cat_id in enumerate(cat_ids):
        for image_id in image_order:
            gts = gts_by.get((image_id, cat_id), [])
            dets = dets_by.get((image_id, cat_id), [])
            if not gts and not dets:
                continue
            hw = image_size[image_id]
            order = sorted(range(len(dets)), key=lambda i: _det_sort_key(i, dets[i]))
            order = order[:max_cap]
            det_geo = [det_geometry(("det", task, image_id, cat_id, i), dets[i], hw)
                       for i in order]
            gt_geo = [gt_geometry(g, hw) for g in gts]
            iou_fn = box_iou if task == "box" else mask_iou
            iou_all = np.array([[iou_fn(dg, gg) for gg in gt_geo] for dg, _ in det_geo],
                               dtype=np.float64).reshape(len(order), len(gts))
            gt_area = np.array([float(g["area"]) for g in gts], dtype=np.float64)
            det_area = np.array([a for _, a in det_geo], dtype=np.float64)
            scores = np.array([dets[i]["score"] for i in order], dtype=np.float64)
            for ai, (_, lo, hi) in enumerate(cfg.area_ranges):
                gt_ignore = ~((gt_area >= lo) & (gt_area < hi))
                gt_order = np.argsort(gt_ignore, kind="mergesort")  # countable first
                iou = iou_all[:, gt_order]
                ignore_sorted = gt_ignore[gt_order]
                matched = np.zeros((n_t, len(order)), dtype=bool)
                ignored = np.zeros((n_t, len(order)), dtype=bool)
                det_out = ~((det_area >= lo) & (det_area < hi))
                for ti, thr in enumerate(thresholds):
                    det_match, _, det_ig = _greedy_match(iou, float(thr), ignore_sorted)
                    matched[ti] = det_match >= 0
                    # unmatched dets outside the range are ignored, not FP
                    ignored[ti] = det_ig | ((det_match < 0) & det_out)
                records[ki][ai].append(_ImageCatRecord(
                    scores, matched, ignored, int((~gt_ignore).sum())))

    precision = -np.ones((n_t, n_r, n_k, n_a, n_m))
    recall = -np.ones((n_t, n_k, n_a, n_m))
    for ki in range(n_k):
        for ai in range(n_a):
            recs = records[ki][ai]
            npig = sum(r.n_countable_gt for r in recs)
            if npig == 0:
                continue
            for mi, cap in enumerate(cfg.max_dets):
                scores = np.concatenate([r.scores[:cap] for r in recs]) if recs else \
                    np.zeros(0)
                order = np.argsort(-scores, kind="mergesort")
                for ti in range(n_t):
                    matched = (np.concatenate([r.matched[ti, :cap] for r in recs])
                               if recs else np.zeros(0, dtype=bool))[order]
                    ignored = (np.concatenate([r.ignored[ti, :cap] for r in recs])
                               if recs else np.zeros(0, dtype=bool))[order]
                    flags = np.where(ignored, 0, np.where(matched, 1, -1))
                    pr, rc = pr_curve(flags, npig)
                    recall[ti, ki, ai, mi] = rc[-1] if len(rc) else 0.0
                    precision[ti, :, ki, ai, mi] = _sample_precision(
                        pr, rc, cfg.recall_points)

    def mean_valid(arr: np.ndarray) -> float:
        vals = arr[arr > -1]
        return float(vals.mean()) if vals.size else -1.0

    def summary_for(k_slice) -> EvalSummary:
        p = precision[:, :, k_slice, :, :]
        r = recall[:, k_slice, :, :]
        m100 = cfg.max_dets.index(100) if 100 in cfg.max_dets else n_m - 1
        return EvalSummary(
            ap=mean_valid(p[:, :, :, 0, m100]),
            ap50=mean_valid(p[0, :, :, 0, m100]),
            ap75=mean_valid(p[5, :, :, 0, m100]) if n_t > 5 else -1.0,
            ap_small=mean_valid(p[:, :, :, 1, m100]) if n_a > 1 else -1.0,
            ar_1=mean_valid(r[:, :, 0, 0]),
            ar_10=mean_valid(r[:, :, 0, 1]) if n_m > 1 else -1.0,
            ar_100=mean_valid(r[:, :, 0, m100]),
            ar_small=mean_valid(r[:, :, 1, m100]) if n_a > 1 else -1.0,
        )

    name_of = {c["id"]: c.get("name", str(c["id"])) for c in categories}
    per_category = []
    for ki, cat_id in enumerate(cat_ids):
        s = summary_for(slice(ki, ki + 1))
        per_category.append({"id": cat_id, "name": name_of[cat_id], **s.to_dict()})
    return EvalResult(task=task, config=cfg, summary=summary_for(slice(None)),
                      per_category=per_category, precision=precision, recall=recall)


def _sample_precision(pr: np.ndarray, rc: np.ndarray, recall_points) -> np.ndarray:
    pr = np.array(pr, dtype=np.float64, copy=True)
    for i in range(len(pr) - 1, 0, -1):
        if pr[i] > pr[i - 1]:
            pr[i - 1] = pr[i]
    q = np.zeros(len(recall_points), dtype=np.float64)
    inds = np.searchsorted(rc, recall_points, side="left")
    for ri, pi in enumerate(inds):
        if pi >= len(pr):
            break
        q[ri] = pr[pi]
    return q


def summarize(ground_truth, detections, images, categories,
              config: EvalConfig | None = None, task: str = "box") -> EvalSummary:
    """Eight-number summary (AP, AP50, AP75, AP_S, AR_1, AR_10, AR_100, AR_S)."""
    return evaluate(ground_truth, detections, images, categories, config, task).summary


def write_report(path: str | Path, results: dict[str, EvalResult]) -> None:
    """Write report.json plus a metrics.csv next to it with per-category rows."""
    path = Path(path)
    payload = {}
    for task, res in results.items():
        payload[task] = {"summary": res.summary.to_dict(),
                         "per_category": res.per_category}
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1)
    fields = ["AP", "AP50", "AP75", "AP_S", "AR_1", "AR_10", "AR_100", "AR_S"]
    with open(path.parent / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "category"] + fields)
        for task, res in results.items():
            summary = res.summary.to_dict()
            writer.writerow([task, "all"] + [repr(summary[f]) for f in fields])
            for row in res.per_category:
                writer.writerow([task, row["name"]] + [repr(row[f]) for f in fields])
