"""Box algebra, default-box grids, ground-truth matching and NMS.

Boxes live in pixel corner coordinates (x1, y1, x2, y2).  Default boxes
("anchors") are laid out one grid per feature hierarchy: each cell emits one
box per aspect ratio at the hierarchy's scale, plus an extra square box at
the geometric mean of this and the next hierarchy's scale.  Anchors are kept
unclipped; clipping to the image happens only when decoding predictions.

Everything here is pure computation over immutable values and is safe for
unrestricted concurrent use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, left-top and right-bottom corners."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ContractError(
                f"degenerate box: ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def w(self) -> float:
        return self.x2 - self.x1

    @property
    def h(self) -> float:
        return self.y2 - self.y1

    @property
    def cx(self) -> float:
        return 0.5 * (self.x1 + self.x2)

    @property
    def cy(self) -> float:
        return 0.5 * (self.y1 + self.y2)

    @property
    def area(self) -> float:
        return self.w * self.h

    @staticmethod
    def from_center(cx: float, cy: float, w: float, h: float) -> "Box":
        return Box(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


def boxes_to_array(boxes: Sequence[Box]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    return np.array([b.as_tuple() for b in boxes], dtype=np.float64)


def jaccard(a: Box, b: Box) -> float:
    """Intersection over union; 0 when the union has zero area."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        inter = 0.0
    else:
        inter = ix * iy
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def jaccard_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (m,4) and (n,4) corner arrays -> (m,n)."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]), dtype=np.float64)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


DEFAULT_ASPECT_RATIOS = (0.5, 1.0, 1.5, 2.0, 2.0 / 3.0)


@dataclass(frozen=True)
class AnchorParams:
    """Default-box generation parameters shared by all hierarchies.

    ``rf_sizes`` holds one receptive-field-derived box size per hierarchy,
    in pixels of the network input; the fractional scale endpoints are
    s0 = rf_sizes[0]/d_min and sl = rf_sizes[-1]/d_min, and hierarchy k gets
    the linear interpolation between them.  The printed form of the scale
    rule is ambiguous about the interpolation denominator, so it is an
    option: "count-1" (default, hits both endpoints) or "count-2".
    """

    rf_sizes: tuple[float, ...]
    d_min: float
    delta: float = 0.5
    aspect_ratios: tuple[float, ...] = DEFAULT_ASPECT_RATIOS
    scale_denominator: str = "count-1"

    def __post_init__(self):
        object.__setattr__(self, "rf_sizes", tuple(float(v) for v in self.rf_sizes))
        object.__setattr__(
            self, "aspect_ratios", tuple(float(v) for v in self.aspect_ratios)
        )
        if self.l < 2:
            raise ContractError("anchor params need at least 2 hierarchies")
        if not (0.0 < self.s0 <= self.sl <= 1.0):
            raise ContractError(
                f"scale endpoints must satisfy 0 < s0 <= sl <= 1, got "
                f"s0={self.s0}, sl={self.sl}"
            )
        if self.scale_denominator not in ("count-1", "count-2"):
            raise ContractError("scale_denominator must be 'count-1' or 'count-2'")
        if self.scale_denominator == "count-2" and self.l < 3:
            raise ContractError("'count-2' denominator needs at least 3 hierarchies")
        if not self.aspect_ratios:
            raise ContractError("at least one aspect ratio is required")

    @property
    def l(self) -> int:
        return len(self.rf_sizes)

    @property
    def s0(self) -> float:
        return self.rf_sizes[0] / self.d_min

    @property
    def sl(self) -> float:
        return self.rf_sizes[-1] / self.d_min

    @property
    def boxes_per_cell(self) -> int:
        return len(self.aspect_ratios) + 1


def _scale_fraction(k: int, params: AnchorParams) -> float:
    denom = params.l - 1 if params.scale_denominator == "count-1" else params.l - 2
    return params.s0 + k * (params.sl - params.s0) / denom


def anchor_scale(k: int, params: AnchorParams) -> float:
    """Default-box size in pixels for hierarchy k."""
    if not 0 <= k < params.l:
        raise ContractError(f"hierarchy index {k} out of range [0, {params.l})")
    return _scale_fraction(k, params) * params.d_min


@dataclass(frozen=True)
class AnchorSet:
    """All default boxes of one hierarchy, in a fixed flat order.

    Order: cells row-major (y outer, x inner), then one box per aspect
    ratio in declared order, then the extra geometric-mean square box.
    ``boxes`` is an (M, 4) corner array; :meth:`box` lifts a row to a Box.
    """

    k: int
    feat_dims: tuple[int, int]   # (w_f, h_f)
    image_dims: tuple[float, float]  # (w_i, h_i)
    strides: tuple[float, float]  # (S_w, S_h)
    boxes: np.ndarray = field(repr=False)
    aspect_ratios: tuple[float, ...]

    def __post_init__(self):
        w_f, h_f = self.feat_dims
        expected = w_f * h_f * (len(self.aspect_ratios) + 1)
        if self.boxes.shape != (expected, 4):
            raise ContractError(
                f"anchor set must hold {expected} boxes, got {self.boxes.shape}"
            )

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def box(self, i: int) -> Box:
        return Box(*self.boxes[i])

    def cell_of(self, i: int) -> tuple[int, int, int]:
        """Map a flat index back to (cell x, cell y, ratio slot)."""
        per_cell = len(self.aspect_ratios) + 1
        cell, slot = divmod(i, per_cell)
        w_f = self.feat_dims[0]
        y, x = divmod(cell, w_f)
        return x, y, slot

    def ratio_of(self, i: int) -> float:
        """Aspect ratio of box i (the extra square box reports 1.0)."""
        slot = i % (len(self.aspect_ratios) + 1)
        if slot < len(self.aspect_ratios):
            return self.aspect_ratios[slot]
        return 1.0


def generate_anchors(
    k: int,
    feat_dims: tuple[int, int],
    image_dims: tuple[float, float],
    params: AnchorParams,
) -> AnchorSet:
    """Tile the default boxes of hierarchy k over its feature grid.

    Cell (x, y) centers at ((x + delta) * S_w, (y + delta) * S_h).  Each
    ratio contributes a box of width s_k and height s_k * ratio; the extra
    box is square at sqrt(s_k * s_{k+1}), with s_{k+1} extrapolated by the
    same linear rule at the last hierarchy.  Boxes are not clipped.
    """
    w_f, h_f = feat_dims
    w_i, h_i = image_dims
    if w_f <= 0 or h_f <= 0 or w_i <= 0 or h_i <= 0:
        raise ContractError("feature and image dims must be positive")
    s_w = w_i / w_f
    s_h = h_i / h_f
    size = anchor_scale(k, params)
    size_next = _scale_fraction(k + 1, params) * params.d_min
    extra = math.sqrt(size * size_next)

    widths = [size] * len(params.aspect_ratios) + [extra]
    heights = [size * ar for ar in params.aspect_ratios] + [extra]
    half_w = 0.5 * np.array(widths)
    half_h = 0.5 * np.array(heights)

    xs = (np.arange(w_f) + params.delta) * s_w
    ys = (np.arange(h_f) + params.delta) * s_h
    cx = np.tile(xs, h_f)                    # y outer, x inner
    cy = np.repeat(ys, w_f)

    per_cell = len(widths)
    boxes = np.empty((w_f * h_f * per_cell, 4), dtype=np.float64)
    cxr = np.repeat(cx, per_cell)
    cyr = np.repeat(cy, per_cell)
    hwr = np.tile(half_w, w_f * h_f)
    hhr = np.tile(half_h, w_f * h_f)
    boxes[:, 0] = cxr - hwr
    boxes[:, 1] = cyr - hhr
    boxes[:, 2] = cxr + hwr
    boxes[:, 3] = cyr + hhr

    return AnchorSet(
        k=k,
        feat_dims=(w_f, h_f),
        image_dims=(float(w_i), float(h_i)),
        strides=(s_w, s_h),
        boxes=boxes,
        aspect_ratios=params.aspect_ratios,
    )


NEGATIVE = -1


@dataclass(frozen=True)
class MatchResult:
    """Per-anchor assignment: label is a ground-truth index or NEGATIVE.

    ``best_iou[i]`` is anchor i's maximum overlap against any ground truth,
    regardless of which one it was assigned to.
    """

    labels: np.ndarray = field(repr=False)
    best_iou: np.ndarray = field(repr=False)

    @property
    def positive_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels >= 0)

    @property
    def negative_indices(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)

    @property
    def n_positive(self) -> int:
        return int((self.labels >= 0).sum())


def concat_anchor_boxes(anchor_sets: Sequence[AnchorSet]) -> np.ndarray:
    return np.concatenate([s.boxes for s in anchor_sets], axis=0)


def match_anchors(
    anchor_sets: Sequence[AnchorSet],
    gts: Sequence[Box],
    threshold: float = 0.5,
) -> MatchResult:
    """Assign anchors to ground truths: argmax first, then by overlap.

    Stage 1 walks ground truths in order; each claims its highest-overlap
    anchor among those still unclaimed (ties to the lowest anchor index),
    so every ground truth ends up with at least one positive.  Stage 2
    marks every remaining anchor whose best overlap exceeds the threshold
    as positive for its argmax ground truth.  Everything else is negative.
    """
    if not 0.0 < threshold < 1.0:
        raise ContractError("matching threshold must lie in (0, 1)")
    anchors = concat_anchor_boxes(anchor_sets)
    m = anchors.shape[0]
    gt_arr = boxes_to_array(gts)
    labels = np.full(m, NEGATIVE, dtype=np.int64)
    if gt_arr.shape[0] == 0:
        return MatchResult(labels=labels, best_iou=np.zeros(m, dtype=np.float64))

    iou = jaccard_matrix(anchors, gt_arr)
    best_iou = iou.max(axis=1)

    claimed = np.zeros(m, dtype=bool)
    for j in range(gt_arr.shape[0]):
        if claimed.all():
            break  # more ground truths than anchors: the surplus goes unmatched
        col = iou[:, j].copy()
        col[claimed] = -1.0
        i = int(np.argmax(col))
        labels[i] = j
        claimed[i] = True

    best_gt = iou.argmax(axis=1)
    grab = (~claimed) & (best_iou > threshold)
    labels[grab] = best_gt[grab]
    return MatchResult(labels=labels, best_iou=best_iou)


def encode_offsets(g: Box, d: Box) -> tuple[float, float, float, float]:
    """Center-form regression targets from default box d to ground truth g."""
    if g.w <= 0 or g.h <= 0:
        raise ContractError("ground-truth box must have positive width/height")
    if d.w <= 0 or d.h <= 0:
        raise ContractError("default box must have positive width/height")
    return (
        (g.cx - d.cx) / d.w,
        (g.cy - d.cy) / d.h,
        math.log(g.w / d.w),
        math.log(g.h / d.h),
    )


# log-size offsets are capped before exponentiation: real boxes never get
# near e^50, and an unconverged predictor must not overflow the decoder
_LOG_SIZE_CAP = 50.0


def decode_offsets(
    offsets: Sequence[float],
    d: Box,
    clip_to: tuple[float, float] | None = None,
) -> Box:
    """Exact inverse of :func:`encode_offsets`, optionally clipped."""
    ocx, ocy, ow, oh = (float(v) for v in offsets)
    cx = ocx * d.w + d.cx
    cy = ocy * d.h + d.cy
    w = math.exp(min(max(ow, -_LOG_SIZE_CAP), _LOG_SIZE_CAP)) * d.w
    h = math.exp(min(max(oh, -_LOG_SIZE_CAP), _LOG_SIZE_CAP)) * d.h
    x1, y1, x2, y2 = cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0
    if clip_to is not None:
        mx, my = clip_to
        x1 = min(max(x1, 0.0), mx)
        x2 = min(max(x2, 0.0), mx)
        y1 = min(max(y1, 0.0), my)
        y2 = min(max(y2, 0.0), my)
    return Box(x1, y1, x2, y2)


def encode_offsets_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Row-wise :func:`encode_offsets` over (n,4) corner arrays."""
    acx = 0.5 * (anchors[:, 0] + anchors[:, 2])
    acy = 0.5 * (anchors[:, 1] + anchors[:, 3])
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    gcx = 0.5 * (gt[:, 0] + gt[:, 2])
    gcy = 0.5 * (gt[:, 1] + gt[:, 3])
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ContractError("ground-truth boxes must have positive width/height")
    out = np.empty_like(gt)
    out[:, 0] = (gcx - acx) / aw
    out[:, 1] = (gcy - acy) / ah
    out[:, 2] = np.log(gw / aw)
    out[:, 3] = np.log(gh / ah)
    return out


def decode_offsets_array(
    offsets: np.ndarray,
    anchors: np.ndarray,
    clip_to: tuple[float, float] | None = None,
) -> np.ndarray:
    acx = 0.5 * (anchors[:, 0] + anchors[:, 2])
    acy = 0.5 * (anchors[:, 1] + anchors[:, 3])
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    cx = offsets[:, 0] * aw + acx
    cy = offsets[:, 1] * ah + acy
    w = np.exp(np.clip(offsets[:, 2], -_LOG_SIZE_CAP, _LOG_SIZE_CAP)) * aw
    h = np.exp(np.clip(offsets[:, 3], -_LOG_SIZE_CAP, _LOG_SIZE_CAP)) * ah
    out = np.empty_like(offsets)
    out[:, 0] = cx - w / 2.0
    out[:, 1] = cy - h / 2.0
    out[:, 2] = cx + w / 2.0
    out[:, 3] = cy + h / 2.0
    if clip_to is not None:
        mx, my = clip_to
        out[:, 0::2] = np.clip(out[:, 0::2], 0.0, mx)
        out[:, 1::2] = np.clip(out[:, 1::2], 0.0, my)
    return out


def nms(dets: Sequence, iou_threshold: float = 0.45) -> list:
    """Greedy suppression by descending score (ties keep input order).

    A detection is dropped when its overlap with an already-kept one
    strictly exceeds the threshold.  Works on anything with ``box`` and
    ``score`` attributes and returns the survivors in processing order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ContractError("nms threshold must lie in (0, 1]")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    idx = np.array(order, dtype=np.int64)
    boxes = np.array([dets[i].box.as_tuple() for i in order], dtype=np.float64)
    kept: list = []
    while idx.size:
        kept.append(dets[int(idx[0])])
        if idx.size == 1:
            break
        ious = jaccard_matrix(boxes[:1], boxes[1:])[0]
        survive = ious <= iou_threshold
        idx = idx[1:][survive]
        boxes = boxes[1:][survive]
    return kept
