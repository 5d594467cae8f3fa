"""Multi-task detection objective with online hard example mining.

The objective is (confidence + alpha * localization) / N, where N counts
matched positive anchors.  Confidence is a 2-class cross entropy over the
positives plus the hardest negatives (at most ``ratio`` negatives per
positive); localization is smooth L1 on center-form offsets of positives.
Class order is background = 0, face = 1.

:func:`total_loss` is the differentiable entry point: it records a single
node on the active tape with analytically derived adjoints for the logits
and offset tensors, so the whole network trains end to end through it.
:func:`conf_loss` and :func:`loc_loss` are the plain-value reference paths.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError
from .geometry import (
    AnchorSet,
    Box,
    MatchResult,
    boxes_to_array,
    concat_anchor_boxes,
    encode_offsets_array,
)
from .tensor import Tape, Tensor, softmax2_values

_LOG_FLOOR = 1e-12  # keeps log() finite for fully saturated probabilities


@dataclass(frozen=True)
class LossBreakdown:
    """Components of one image's objective.

    ``conf`` and ``loc`` are the raw sums; ``total`` is their alpha-weighted
    combination divided by ``n_matched`` (exactly 0.0 when nothing matched).
    """

    total: float
    conf: float
    loc: float
    n_matched: int
    n_selected_neg: int


def smooth_l1(x: float) -> float:
    """0.5*x^2 inside |x| < 1, |x| - 0.5 outside; C1 at the joint."""
    ax = abs(x)
    if ax < 1.0:
        return 0.5 * x * x
    return ax - 0.5


def _smooth_l1_arr(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def _smooth_l1_grad(x: np.ndarray) -> np.ndarray:
    return np.clip(x, -1.0, 1.0)


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def per_anchor_conf_losses(logits, match: MatchResult) -> np.ndarray:
    """Cross-entropy each anchor would contribute under its current label.

    Positives score -log p(face), negatives -log p(background); this is the
    ranking signal for hard-negative selection.
    """
    probs = softmax2_values(_as_array(logits))
    p_face = np.maximum(probs[:, 1], _LOG_FLOOR)
    p_bg = np.maximum(probs[:, 0], _LOG_FLOOR)
    return np.where(match.labels >= 0, -np.log(p_face), -np.log(p_bg))


def ohem_select(
    conf_losses: np.ndarray,
    match: MatchResult,
    ratio: float = 3.0,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Pick the hardest negatives, capped at ratio * positives.

    Negatives are ordered by descending confidence loss with ties broken by
    anchor index; passing ``rng`` randomizes the order among exact ties
    instead.  Returns min(floor(ratio * n_pos), n_neg) indices, hardest
    first.
    """
    if ratio <= 0:
        raise ContractError("ohem ratio must be positive")
    conf_losses = np.asarray(conf_losses, dtype=np.float64)
    negatives = match.negative_indices
    n_pos = match.n_positive
    count = min(int(ratio * n_pos), negatives.size)
    if count == 0:
        return np.zeros(0, dtype=np.int64)
    if rng is not None:
        negatives = rng.permutation(negatives)
    # stable sort keeps the (index or shuffled) order among equal losses
    order = np.argsort(-conf_losses[negatives], kind="stable")
    return negatives[order[:count]]


def conf_loss(logits, match: MatchResult, selected_negs) -> float:
    """Cross-entropy over positives plus the given negatives."""
    selected = np.asarray(selected_negs, dtype=np.int64)
    if selected.size and np.any(match.labels[selected] >= 0):
        raise ContractError("selected negatives overlap the positive set")
    per = per_anchor_conf_losses(logits, match)
    return float(per[match.positive_indices].sum() + per[selected].sum())


def loc_loss(
    pred_offsets,
    anchor_sets: Sequence[AnchorSet],
    gts: Sequence[Box],
    match: MatchResult,
) -> float:
    """Smooth-L1 distance of positive anchors' offsets to their targets."""
    pos = match.positive_indices
    if pos.size == 0:
        return 0.0
    offsets = _as_array(pred_offsets)
    anchors = concat_anchor_boxes(anchor_sets)
    gt_arr = boxes_to_array(gts)
    targets = encode_offsets_array(gt_arr[match.labels[pos]], anchors[pos])
    return float(_smooth_l1_arr(offsets[pos] - targets).sum())


def total_loss(
    logits: Tensor,
    pred_offsets: Tensor,
    anchor_sets: Sequence[AnchorSet],
    gts: Sequence[Box],
    match: MatchResult,
    alpha: float = 1.0,
    ohem_ratio: float = 3.0,
    rng: np.random.Generator | None = None,
    selected_negs=None,
) -> tuple[LossBreakdown, Tensor]:
    """Full objective with mined negatives, differentiable via the tape.

    Returns the breakdown and a scalar tensor.  With no positives the loss
    is exactly zero and contributes no gradient at all.  Passing
    ``selected_negs`` pins the negative set instead of mining it, which
    holds the objective on one smooth piece (finite-difference checks) or
    replays a recorded selection.
    """
    if alpha <= 0:
        raise ContractError("loss alpha must be positive")
    n_pos = match.n_positive
    if n_pos == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0, 0), Tensor(0.0)

    logits_data = logits.data
    off_data = pred_offsets.data
    probs = softmax2_values(logits_data)
    per = per_anchor_conf_losses(logits_data, match)
    if selected_negs is None:
        selected = ohem_select(per, match, ohem_ratio, rng)
    else:
        selected = np.asarray(selected_negs, dtype=np.int64)
        if selected.size and np.any(match.labels[selected] >= 0):
            raise ContractError("selected negatives overlap the positive set")
    pos = match.positive_indices

    conf_raw = float(per[pos].sum() + per[selected].sum())

    anchors = concat_anchor_boxes(anchor_sets)
    gt_arr = boxes_to_array(gts)
    targets = encode_offsets_array(gt_arr[match.labels[pos]], anchors[pos])
    residuals = off_data[pos] - targets
    loc_raw = float(_smooth_l1_arr(residuals).sum())

    total = (conf_raw + alpha * loc_raw) / n_pos
    breakdown = LossBreakdown(total, conf_raw, loc_raw, n_pos, int(selected.size))

    tape = Tape.active()
    recorded = tape is not None and (logits.requires_grad or pred_offsets.requires_grad)
    out = Tensor(np.asarray(total), requires_grad=recorded, _lazy_grad=True)
    if recorded:

        def pull_logits(g):
            gl = np.zeros_like(logits_data)
            gl[pos] = probs[pos] - np.array([0.0, 1.0])
            gl[selected] = probs[selected] - np.array([1.0, 0.0])
            return gl * (float(g) / n_pos)

        def pull_offsets(g):
            go = np.zeros_like(off_data)
            go[pos] = _smooth_l1_grad(residuals)
            return go * (alpha * float(g) / n_pos)

        pulls = []
        if logits.requires_grad:
            pulls.append((logits, pull_logits))
        if pred_offsets.requires_grad:
            pulls.append((pred_offsets, pull_offsets))
        tape.record(out, pulls)
    return breakdown, out
