"""Sliding-window multi-view detection, NMS and joint localization/viewpoint metrics.

Metrics follow the VOC protocol: detections are ranked by score, each is
greedily matched to the unmatched ground truth of highest IoU at or above the
threshold, duplicates are false positives, and AP is the all-points
interpolated area under the precision/recall curve.

The viewpoint-aware variants reuse the same matching and only reweight the
true positives: AP+VP-D gives weight 1 when the predicted bin equals the
true bin and 0 otherwise; AP+VP-C gives ``(180 - |angle error|) / 180`` with
the minimal cyclic difference between bin centers.  Since both weights are
pointwise <= 1 and D <= C, the three APs are ordered.  VP is the bin accuracy
over the true positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .model import MultiViewModel


class EvaluationError(ValueError):
    pass


@dataclass
class FeatureMap:
    data: np.ndarray            # (H, W, L)
    cell_size: int = 8
    image_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ValueError("feature map must be (H, W, L)")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map entries must be finite")


@dataclass(frozen=True)
class Detection:
    bbox: tuple                 # x, y, w, h in pixels
    score: float
    view: int
    model_id: int = 0
    image_id: str = ""


@dataclass(frozen=True)
class GroundTruthBox:
    bbox: tuple
    view: int                   # bin index
    category: str = ""
    difficult: bool = False
    image_id: str = ""


@dataclass
class EvalReport:
    ap: float
    vp: float
    ap_vp_d: float
    ap_vp_c: float
    recall: np.ndarray
    precision: np.ndarray
    confusion: np.ndarray
    iou_threshold: float
    n_gt: int
    n_tp: int
    extras: dict = field(default_factory=dict)

    def as_row(self) -> dict:
        return {"AP": self.ap, "VP": self.vp, "AP+VP-D": self.ap_vp_d, "AP+VP-C": self.ap_vp_c}


def iou(a, b) -> float:
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = min(ax + aw, bx + bw) - max(ax, bx)
    ih = min(ay + ah, by + bh) - max(ay, by)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (aw * ah + bw * bh - inter)


def _sort_key(d: Detection):
    # descending score; ties broken by x, y, view ascending
    return (-d.score, d.bbox[0], d.bbox[1], d.view, d.model_id)


def nms(dets: list[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy NMS, suppressing boxes whose IoU with a kept box exceeds the threshold."""
    kept: list[Detection] = []
    for d in sorted(dets, key=_sort_key):
        if all(iou(d.bbox, k.bbox) <= iou_threshold for k in kept if k.image_id == d.image_id):
            kept.append(d)
    return kept


def score_map(model: MultiViewModel, fmap: FeatureMap) -> np.ndarray:
    """Per-placement, per-view scores of shape ``(H - n + 1, W - m + 1, V)``."""
    lay = model.layout
    H, W, L = fmap.data.shape
    if L != lay.cell_dim:
        raise ValueError(f"feature map has {L} channels, model expects {lay.cell_dim}")
    if H < lay.rows or W < lay.cols:
        raise ValueError("feature map smaller than the template")
    win = sliding_window_view(fmap.data, (lay.rows, lay.cols), axis=(0, 1))
    # win: (H', W', L, n, m) -> (H', W', n, m, L)
    win = np.moveaxis(win, 2, -1).reshape(H - lay.rows + 1, W - lay.cols + 1, -1)
    T = model.templates().reshape(lay.views, -1)
    return win @ T.T + model.biases()


def detect(model: MultiViewModel, fmap: FeatureMap, score_threshold: float = -np.inf,
           nms_iou: float = 0.5, model_id: int = 0) -> list[Detection]:
    lay = model.layout
    S = score_map(model, fmap)
    best = S.max(axis=2)
    view = S.argmax(axis=2)
    cs = fmap.cell_size
    dets = []
    for r, c in zip(*np.nonzero(best >= score_threshold)):
        dets.append(Detection((c * cs, r * cs, lay.cols * cs, lay.rows * cs), float(best[r, c]),
                              int(view[r, c]), model_id, fmap.image_id))
    return nms(dets, nms_iou)


def joint_nms(bank: list[list[Detection]], nms_iou: float = 0.5) -> list[Detection]:
    """Pool the detections of several models and suppress across them as one set."""
    pooled = [d for dets in bank for d in dets]
    return nms(pooled, nms_iou)


def _match(dets: list[Detection], gts: list[GroundTruthBox], thresh: float):
    """Return score-sorted detections with matched GT index (or -1)."""
    order = sorted(dets, key=_sort_key)
    by_image: dict = {}
    for gi, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(gi)
    used = np.zeros(len(gts), dtype=bool)
    matched = []
    for d in order:
        best, best_iou = -1, thresh
        for gi in by_image.get(d.image_id, ()):
            if used[gi]:
                continue
            o = iou(d.bbox, gts[gi].bbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = gi, o
        if best >= 0:
            used[best] = True
        matched.append(best)
    return order, np.array(matched, dtype=np.int64)


def pr_curve(tp_weights: np.ndarray, n_gt: int):
    """Precision/recall at every rank for (possibly fractional) true-positive weights."""
    tp = np.cumsum(tp_weights)
    ranks = np.arange(1, len(tp_weights) + 1)
    return tp / n_gt, tp / ranks


def average_precision(tp_weights: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP: ``sum_i dr_i * max_{j >= i} p_j``."""
    if len(tp_weights) == 0:
        return 0.0
    rec, prec = pr_curve(tp_weights, n_gt)
    env = np.maximum.accumulate(prec[::-1])[::-1]
    dr = np.diff(np.concatenate([[0.0], rec]))
    return float(np.sum(dr * env))


def angular_weight(pred_bin: int, true_bin: int, n_views: int) -> float:
    step = 360.0 / n_views
    d = abs(pred_bin - true_bin) % n_views
    ang = min(d, n_views - d) * step
    return (180.0 - ang) / 180.0


def evaluate(dets: list[Detection], gts: list[GroundTruthBox], n_views: int,
             iou_threshold: float = 0.5) -> EvalReport:
    if not gts:
        raise EvaluationError("no ground truth boxes: AP is undefined")
    order, match = _match(dets, gts, iou_threshold)
    is_tp = match >= 0
    pred = np.array([d.view for d in order], dtype=np.int64)
    true = np.array([gts[g].view if g >= 0 else -1 for g in match], dtype=np.int64)
    same = is_tp & (pred == true)
    w_d = same.astype(float)
    w_c = np.array([angular_weight(p, t, n_views) if ok else 0.0
                    for p, t, ok in zip(pred, true, is_tp)])
    n_gt = len(gts)
    rec, prec = pr_curve(is_tp.astype(float), n_gt) if len(order) else (np.zeros(0), np.zeros(0))
    conf = np.zeros((n_views, n_views), dtype=np.int64)
    for p, t in zip(pred[is_tp], true[is_tp]):
        conf[t, p] += 1
    n_tp = int(is_tp.sum())
    vp = float(np.trace(conf) / n_tp) if n_tp else 0.0
    return EvalReport(ap=average_precision(is_tp.astype(float), n_gt), vp=vp,
                      ap_vp_d=average_precision(w_d, n_gt), ap_vp_c=average_precision(w_c, n_gt),
                      recall=rec, precision=prec, confusion=conf, iou_threshold=iou_threshold,
                      n_gt=n_gt, n_tp=n_tp)


def view_accuracy(conf: np.ndarray, bins) -> float:
    """Bin accuracy over true positives whose true bin is in ``bins`` (NaN if none)."""
    bins = list(bins)
    total = conf[bins].sum()
    if total == 0:
        return float("nan")
    return float(sum(conf[b, b] for b in bins) / total)
