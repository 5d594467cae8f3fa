"""Detection scoring: greedy matching, average precision, ROC curves.

Detections are matched to ground truth in descending score order; each
ground truth can satisfy only one detection.  Average precision integrates
the precision envelope over recall (all-point interpolation), with recall
measured against the full ground-truth count.  The ROC curves sweep a score
threshold over the detection set: the discrete variant credits a matched
detection with 1, the continuous variant with its region overlap against
the rasterized ground-truth ellipse.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .data import EllipseAnnotation, ellipse_to_box
from .errors import ContractError, EvalError
from .geometry import Box, jaccard, nms


@dataclass(frozen=True)
class Detection:
    """A scored box prediction tied to its source image."""

    box: Box
    score: float
    image_id: str = ""

    def __post_init__(self):
        if not np.isfinite(self.score) or not 0.0 <= self.score <= 1.0:
            raise ContractError("detection score must lie in [0, 1]")


@dataclass(frozen=True)
class EvalCurve:
    """An ordered metric curve plus its scalar summary."""

    points: tuple[tuple[float, float], ...]
    kind: str  # "pr" | "roc-discrete" | "roc-continuous"
    summary: float

    def __post_init__(self):
        xs = [p[0] for p in self.points]
        if any(b < a for a, b in zip(xs, xs[1:])):
            raise ContractError("curve x values must be non-decreasing")


def _score_order(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[Box],
    iou_thresh: float = 0.5,
) -> list[bool]:
    """True/false-positive flags per detection, in input order.

    Walking detections by descending score, each claims its best-IoU
    still-unmatched ground truth if that IoU reaches the threshold.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ContractError("iou threshold must lie in (0, 1)")
    flags = [False] * len(dets)
    unmatched = list(range(len(gts)))
    for i in _score_order(dets):
        best_j, best_iou = -1, 0.0
        for j in unmatched:
            v = jaccard(dets[i].box, gts[j])
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_thresh:
            flags[i] = True
            unmatched.remove(best_j)
    return flags


def _corpus_tp_flags(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Box]],
    iou_thresh: float,
):
    """Greedy matching across images in global score order.

    Returns (ordered detection indices, tp flag per ordered detection,
    matched gt index per ordered detection or -1).
    """
    unmatched = {img: list(range(len(boxes))) for img, boxes in gts.items()}
    order = _score_order(dets)
    flags = []
    matched_gt = []
    for i in order:
        det = dets[i]
        pool = unmatched.get(det.image_id, [])
        best_j, best_iou = -1, 0.0
        for j in pool:
            v = jaccard(det.box, gts[det.image_id][j])
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_thresh:
            flags.append(True)
            matched_gt.append(best_j)
            pool.remove(best_j)
        else:
            flags.append(False)
            matched_gt.append(-1)
    return order, flags, matched_gt


def average_precision(
    dets: Sequence[Detection],
    gts: Mapping[str, Sequence[Box]],
    iou_thresh: float = 0.5,
) -> tuple[float, EvalCurve]:
    """All-point interpolated AP and the raw precision-recall curve."""
    total_gt = sum(len(v) for v in gts.values())
    if total_gt == 0:
        raise EvalError("average precision is undefined without ground truth")
    if len(dets) == 0:
        return 0.0, EvalCurve(points=(), kind="pr", summary=0.0)
    _, flags, _ = _corpus_tp_flags(dets, gts, iou_thresh)
    tp = np.cumsum(np.asarray(flags, dtype=np.float64))
    n = np.arange(1, len(flags) + 1, dtype=np.float64)
    recall = tp / total_gt
    precision = tp / n
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    points = tuple(zip(recall.tolist(), precision.tolist()))
    return float(ap), EvalCurve(points=points, kind="pr", summary=float(ap))


def ellipse_region_iou(
    det: Box,
    ellipse: EllipseAnnotation,
    dims: tuple[int, int],
) -> float:
    """Overlap of a box with an ellipse, both rasterized on a pixel grid.

    ``dims`` is the (H, W) grid of the source image; pixel centers decide
    membership on both sides.
    """
    h, w = dims
    eb = ellipse_to_box(ellipse)
    x_lo = int(max(0, np.floor(min(det.x1, eb.x1))))
    x_hi = int(min(w, np.ceil(max(det.x2, eb.x2)) + 1))
    y_lo = int(max(0, np.floor(min(det.y1, eb.y1))))
    y_hi = int(min(h, np.ceil(max(det.y2, eb.y2)) + 1))
    if x_hi <= x_lo or y_hi <= y_lo:
        return 0.0
    ys, xs = np.mgrid[y_lo:y_hi, x_lo:x_hi]
    xc = xs + 0.5
    yc = ys + 0.5
    u = (xc - ellipse.cx) * np.cos(ellipse.angle) + (yc - ellipse.cy) * np.sin(ellipse.angle)
    v = -(xc - ellipse.cx) * np.sin(ellipse.angle) + (yc - ellipse.cy) * np.cos(ellipse.angle)
    in_e = (u / ellipse.major_radius) ** 2 + (v / ellipse.minor_radius) ** 2 <= 1.0
    in_b = (xc >= det.x1) & (xc < det.x2) & (yc >= det.y1) & (yc < det.y2)
    inter = np.count_nonzero(in_e & in_b)
    union = np.count_nonzero(in_e | in_b)
    if union == 0:
        return 0.0
    return inter / union


def _roc_sweep(
    dets: Sequence[Detection],
    gt_boxes: Mapping[str, Sequence[Box]],
    total_gt: int,
    iou_thresh: float,
    credit,
    kind: str,
) -> EvalCurve:
    """Threshold sweep: x is the cumulative FP count, y the credited TP mass.

    One point is emitted per distinct score value, after all detections at
    that score are processed.
    """
    order, flags, matched = _corpus_tp_flags(dets, gt_boxes, iou_thresh)
    points: list[tuple[float, float]] = []
    fp = 0
    y = 0.0
    for pos, (i, is_tp, j) in enumerate(zip(order, flags, matched)):
        if is_tp:
            y += credit(dets[i], j)
        else:
            fp += 1
        last_of_score = (
            pos + 1 == len(order)
            or dets[order[pos + 1]].score != dets[i].score
        )
        if last_of_score:
            points.append((float(fp), y / total_gt if total_gt else 0.0))
    summary = points[-1][1] if points else 0.0
    return EvalCurve(points=tuple(points), kind=kind, summary=summary)


def roc_discrete(
    dets: Sequence[Detection],
    gt_ellipses: Mapping[str, Sequence[EllipseAnnotation]],
    iou_thresh: float = 0.5,
) -> EvalCurve:
    """Each matched detection counts 1; y is the true-positive rate."""
    gt_boxes = {
        img: [ellipse_to_box(e) for e in ells] for img, ells in gt_ellipses.items()
    }
    total_gt = sum(len(v) for v in gt_ellipses.values())
    return _roc_sweep(dets, gt_boxes, total_gt, iou_thresh,
                      lambda det, j: 1.0, "roc-discrete")


def roc_continuous(
    dets: Sequence[Detection],
    gt_ellipses: Mapping[str, Sequence[EllipseAnnotation]],
    iou_thresh: float = 0.5,
    grid_dims: Mapping[str, tuple[int, int]] | tuple[int, int] = (512, 512),
) -> EvalCurve:
    """Each matched detection counts its region IoU with the gt ellipse.

    ``grid_dims`` gives the rasterization grid per image id, or one grid
    for the whole corpus.
    """
    gt_boxes = {
        img: [ellipse_to_box(e) for e in ells] for img, ells in gt_ellipses.items()
    }
    total_gt = sum(len(v) for v in gt_ellipses.values())

    def credit(det: Detection, j: int) -> float:
        dims = grid_dims[det.image_id] if isinstance(grid_dims, Mapping) else grid_dims
        return ellipse_region_iou(det.box, gt_ellipses[det.image_id][j], dims)

    return _roc_sweep(dets, gt_boxes, total_gt, iou_thresh, credit,
                      "roc-continuous")


def prefilter_detections(
    dets: Sequence[Detection],
    score_floor: float = 0.01,
    nms_iou: float = 0.45,
) -> list[Detection]:
    """Score floor plus per-image NMS, the standard pre-evaluation filter."""
    by_image: dict[str, list[Detection]] = {}
    for d in dets:
        if d.score >= score_floor:
            by_image.setdefault(d.image_id, []).append(d)
    out: list[Detection] = []
    for img in sorted(by_image):
        out.extend(nms(by_image[img], nms_iou))
    return out
