"""Detection and tracking metrics."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .geometry import Box2D, Box3D, Intrinsics, RigidTransform, box_to_2d, iou_2d, iou_3d, iou_bev

IOU_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
VIEWS = ("bev", "2d")


@dataclass
class Detection:
    frame_id: str
    box: Box3D | Box2D
    confidence: float


def _iou(a, b, view: str) -> float:
    if view == "bev":
        return iou_bev(a, b)
    if view == "3d":
        return iou_3d(a, b)
    if view == "2d":
        return iou_2d(a, b)
    raise ValueError(f"unknown view {view!r}")


def match_detections(dets: list[Detection], gts: dict[str, list], threshold: float, view: str = "bev"):
    """Greedy matching in descending confidence (ties keep input order): each
    detection takes the unmatched ground truth of its frame with the highest
    overlap, if that overlap reaches ``threshold``.  Returns (tp flags in
    ranked order, number of ground-truth boxes)."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    used = {fid: np.zeros(len(g), dtype=bool) for fid, g in gts.items()}
    tp = np.zeros(len(order), dtype=bool)
    for r, i in enumerate(order):
        d = dets[i]
        cands = gts.get(d.frame_id, [])
        best, best_j = -1.0, -1
        for j, g in enumerate(cands):
            if used[d.frame_id][j]:
                continue
            v = _iou(d.box, g, view)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= threshold:
            used[d.frame_id][best_j] = True
            tp[r] = True
    return tp, sum(len(g) for g in gts.values())


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-point AP: area under the monotone precision envelope."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(tp) + 1)
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * env))


def evaluate_map(dets: list[Detection], gts: dict[str, list], threshold: float, view: str = "bev") -> float:
    tp, n_gt = match_detections(dets, gts, threshold, view)
    return average_precision(tp, n_gt)


def to_2d(dets: list[Detection], gts: dict[str, list[Box3D]], intr: Intrinsics, cam_from_level: RigidTransform):
    """Image-plane rectangles for 3D detections and ground truth (boxes leaving the view are dropped)."""
    d2 = []
    for d in dets:
        b = box_to_2d(d.box, intr, cam_from_level)
        if b is not None:
            d2.append(Detection(d.frame_id, b, d.confidence))
    g2 = {fid: [b for b in (box_to_2d(g, intr, cam_from_level) for g in boxes) if b is not None]
          for fid, boxes in gts.items()}
    return d2, g2


def map_table(dets: list[Detection], gts: dict[str, list[Box3D]], intr: Intrinsics | None = None,
              cam_from_level: RigidTransform | None = None, thresholds=IOU_THRESHOLDS) -> dict:
    """mAP at every threshold for the BEV view and, given a camera, the 2D view."""
    out = {"bev": {f"{t:.1f}": evaluate_map(dets, gts, t, "bev") for t in thresholds}}
    if intr is not None and cam_from_level is not None:
        d2, g2 = to_2d(dets, gts, intr, cam_from_level)
        out["2d"] = {f"{t:.1f}": evaluate_map(d2, g2, t, "2d") for t in thresholds}
    return out


def precision_at(dets: list[Detection], gts: dict[str, list], threshold: float, view: str = "bev") -> float:
    """Fraction of detections that overlap some ground truth of their frame at ``threshold``."""
    if not dets:
        return 1.0
    hits = sum(any(_iou(d.box, g, view) >= threshold for g in gts.get(d.frame_id, [])) for d in dets)
    return hits / len(dets)


# ---------------------------------------------------------------------------
# tracking

def evaluate_tracking(tracks: list[list[Box3D | None]], gt_tracks: list[list[Box3D | None]],
                      gt_ids: list[list[int | None]] | None = None, iou_threshold: float = 0.5) -> dict:
    """Tracking metrics for tracklets started from ground-truth first boxes.

    ``tracks[i][t]`` is the predicted box of tracklet ``i`` at offset ``t``
    (None when the tracker has no estimate).  ``gt_tracks`` holds the matching
    ground truth.  ``gt_ids[i][t]``, when given, names the ground-truth object
    the prediction actually overlaps most; precision asks that a tracklet's
    last estimate lies on the object it started on.

    Returns the per-offset mean 3D IoU curve, recall (fraction tracked at the
    IoU threshold in BEV at the final frame, measured start to end) and
    precision."""
    T = max((len(t) for t in gt_tracks), default=0)
    sums = np.zeros(T)
    counts = np.zeros(T)
    tracked = 0
    same = 0
    ended = 0
    for i, (pred, gt) in enumerate(zip(tracks, gt_tracks)):
        for t, g in enumerate(gt):
            if g is None:
                continue
            p = pred[t] if t < len(pred) else None
            sums[t] += iou_3d(p, g) if p is not None else 0.0
            counts[t] += 1
        last = len(gt) - 1
        p_last = pred[last] if last < len(pred) else None
        if p_last is not None and gt[last] is not None and iou_bev(p_last, gt[last]) >= iou_threshold:
            tracked += 1
        if p_last is not None:
            ended += 1
            if gt_ids is not None:
                ids = gt_ids[i]
                same += int(ids[0] is not None and ids[-1] == ids[0])
            else:
                same += int(gt[last] is not None and iou_bev(p_last, gt[last]) > 0)
    curve = np.divide(sums, counts, out=np.zeros(T), where=counts > 0)
    n = len(gt_tracks)
    return {"iou_curve": curve.tolist(), "recall": tracked / n if n else 0.0,
            "precision": same / ended if ended else 1.0}


def group_by_frame(items) -> dict[str, list]:
    out = defaultdict(list)
    for fid, box in items:
        out[fid].append(box)
    return dict(out)
