"""SGD trainer, loss logging, and end-to-end detection.

Every source of randomness is derived from the config seed: augmentation
draws come from per-(iteration, slot) generators and the dataset is cycled
by index, so a (config, seed) pair replays to byte-identical logs and
checkpoints.  The optimizer is classical SGD with momentum and coupled
weight decay: v <- mu*v + (g + lambda*w); w <- w - lr*v.

The per-iteration log row is ``iter,total,conf,loc,N,lr`` where total is
the batch-mean objective, conf/loc are batch means of the per-image
normalized components, and N is the batch's matched-positive count.
"""

from __future__ import annotations

from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .data import AnnotatedImage, augment, load_image, resize_with_boxes
from .errors import ContractError, NumericError
from .evaluate import Detection, average_precision
from .geometry import Box, decode_offsets_array, match_anchors, nms
from .loss import total_loss
from .network import Model, flatten_hierarchies, forward_detect
from .tensor import (
    Parameter,
    Tape,
    Tensor,
    backward,
    eltwise_add,
    scale,
    softmax2_values,
    take_item,
)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    """Step-decayed learning rate: one factor per drop point reached."""
    if iteration < 0:
        raise ContractError("iteration cannot be negative")
    passed = sum(1 for d in cfg.lr_drop_iters if d <= iteration)
    return cfg.lr0 * cfg.lr_drop_factor**passed


def sgd_step(params: Sequence[Parameter], cfg: TrainConfig, iteration: int) -> None:
    """Momentum update with coupled weight decay, in place."""
    lr = lr_at(iteration, cfg)
    for p in params:
        g = p.value.grad
        if g is None:
            raise ContractError(f"parameter {p.name} has no gradient")
        if not np.isfinite(g.sum()):
            raise NumericError(f"non-finite gradient in parameter {p.name}")
        v = p.momentum_buffer.data
        v *= cfg.momentum
        v += g + cfg.weight_decay * p.value.data
        p.value.data -= lr * v


def format_log_row(it: int, total: float, conf: float, loc: float,
                   n: int, lr: float) -> str:
    return f"{it},{total:.10g},{conf:.10g},{loc:.10g},{n},{lr:.10g}"


LOG_HEADER = "iter,total,conf,loc,N,lr"


def train_loop(
    model: Model,
    dataset: Sequence[AnnotatedImage],
    cfg: TrainConfig,
    ckpt_path=None,
    log_path=None,
    progress: Callable[[int, float], None] | None = None,
) -> tuple[Model, list[str]]:
    """Run the full schedule; returns the model and the loss log rows.

    The dataset is cycled by index (epoch wrap), each draw is augmented
    with its own derived generator, and a batch with no matched faces
    logs a zero loss and skips the parameter update.  Checkpoints are
    written every ``cfg.checkpoint_every`` iterations and at the end.
    """
    if len(dataset) == 0:
        raise ContractError("training needs a non-empty dataset")
    spec = model.spec
    model.rng_seed = cfg.seed
    rows: list[str] = []
    n_data = len(dataset)

    for it in range(1, cfg.total_iters + 1):
        model.training = True
        batch_imgs = []
        batch_boxes = []
        for slot in range(cfg.batch_size):
            rec = dataset[((it - 1) * cfg.batch_size + slot) % n_data]
            rng = np.random.default_rng([cfg.seed, it, slot])
            sample = augment(rec, rng, spec.input_size)
            batch_imgs.append(sample.image)
            batch_boxes.append(sample.boxes)
        batch = Tensor(np.stack(batch_imgs, axis=0))

        with Tape() as tape:
            outputs = forward_detect(model, batch)
            conf_all, loc_all = flatten_hierarchies(outputs)
            anchor_sets = [o.anchors for o in outputs]
            loss_sum = None
            totals, confs, locs, n_matched = [], [], [], 0
            for i in range(cfg.batch_size):
                match = match_anchors(anchor_sets, batch_boxes[i],
                                      cfg.match_threshold)
                breakdown, loss_i = total_loss(
                    take_item(conf_all, i),
                    take_item(loc_all, i),
                    anchor_sets,
                    batch_boxes[i],
                    match,
                    alpha=cfg.loss_alpha,
                    ohem_ratio=cfg.ohem_ratio,
                )
                totals.append(breakdown.total)
                confs.append(breakdown.conf / breakdown.n_matched
                             if breakdown.n_matched else 0.0)
                locs.append(breakdown.loc / breakdown.n_matched
                            if breakdown.n_matched else 0.0)
                n_matched += breakdown.n_matched
                loss_sum = loss_i if loss_sum is None else eltwise_add(loss_sum, loss_i)

            if n_matched > 0:
                model.zero_grads()
                batch_loss = scale(loss_sum, 1.0 / cfg.batch_size)
                backward(batch_loss, tape)
                sgd_step(model.parameters(), cfg, it)

        model.iteration = it
        row = format_log_row(
            it,
            float(np.mean(totals)),
            float(np.mean(confs)),
            float(np.mean(locs)),
            n_matched,
            lr_at(it, cfg),
        )
        rows.append(row)
        if progress is not None:
            progress(it, float(np.mean(totals)))
        if ckpt_path is not None and cfg.checkpoint_every and \
                it % cfg.checkpoint_every == 0:
            save_checkpoint(model, ckpt_path)

    model.training = False
    if ckpt_path is not None:
        save_checkpoint(model, ckpt_path)
    if log_path is not None:
        Path(log_path).write_text(LOG_HEADER + "\n" + "\n".join(rows) + "\n")
    return model, rows


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def detect_array(
    model: Model,
    image: np.ndarray,
    image_id: str = "",
    score_floor: float = 0.01,
    nms_iou: float = 0.45,
) -> list[Detection]:
    """Detect on a (C,H,W) [0,1] array; boxes come back in its coordinates."""
    spec = model.spec
    c, h0, w0 = image.shape
    if c != spec.in_channels:
        if spec.in_channels == 1:
            image = image.mean(axis=0, keepdims=True)
        else:
            image = np.repeat(image[:1], spec.in_channels, axis=0)
    record = AnnotatedImage(image, [], image_id)
    resized = resize_with_boxes(record, spec.input_size)

    was_training = model.training
    model.training = False
    try:
        outputs = forward_detect(model, Tensor(resized.image[None]))
    finally:
        model.training = was_training
    conf_all, loc_all = flatten_hierarchies(outputs)
    probs = softmax2_values(conf_all.data[0])
    scores = probs[:, 1]
    anchors = np.concatenate([o.anchors.boxes for o in outputs], axis=0)
    size = float(spec.input_size)
    boxes = decode_offsets_array(loc_all.data[0], anchors, clip_to=(size, size))

    sx, sy = w0 / size, h0 / size
    keep = np.flatnonzero(scores >= score_floor)
    dets = [
        Detection(
            box=Box(boxes[i, 0] * sx, boxes[i, 1] * sy,
                    boxes[i, 2] * sx, boxes[i, 3] * sy),
            score=float(scores[i]),
            image_id=image_id,
        )
        for i in keep
    ]
    return nms(dets, nms_iou)


def detect(
    model: Model,
    image_path,
    score_floor: float = 0.01,
    nms_iou: float = 0.45,
) -> list[Detection]:
    """Load an image file and run :func:`detect_array` on it."""
    image = load_image(image_path)
    return detect_array(model, image, image_id=str(image_path),
                        score_floor=score_floor, nms_iou=nms_iou)


def evaluate_corpus(
    model: Model,
    records: Sequence[AnnotatedImage],
    iou_thresh: float = 0.5,
    score_floor: float = 0.01,
    nms_iou: float = 0.45,
):
    """Detect over annotated records and score average precision."""
    dets: list[Detection] = []
    gts = {}
    for rec in records:
        rid = rec.source_id
        gts[rid] = list(rec.boxes)
        dets.extend(detect_array(model, rec.image, rid,
                                 score_floor=score_floor, nms_iou=nms_iou))
    return average_precision(dets, gts, iou_thresh)
