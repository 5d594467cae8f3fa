"""Figure rendering for the CLI report paths.

Every figure goes straight to a file (Agg backend); nothing here opens a
window.  Each report command writes its delimited output and drops the
matching figure next to it.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .data import SizeHistogram
from .evaluate import EvalCurve

_CURVE_LABELS = {
    "pr": ("recall", "precision"),
    "roc-discrete": ("false positives", "true-positive rate"),
    "roc-continuous": ("false positives", "continuous score"),
}


def _new_axes(title: str):
    fig, ax = plt.subplots(figsize=(6.0, 4.0), dpi=120)
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    return fig, ax


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def save_loss_curve(rows, path) -> None:
    """Training log rows -> loss curve with a window-100 smoothed overlay."""
    iters = [int(r.split(",")[0]) for r in rows]
    totals = np.array([float(r.split(",")[1]) for r in rows])
    fig, ax = _new_axes("training loss")
    ax.plot(iters, totals, lw=0.6, alpha=0.45, label="per iteration")
    if len(totals) >= 2:
        window = min(100, len(totals))
        kernel = np.ones(window) / window
        smooth = np.convolve(totals, kernel, mode="valid")
        ax.plot(iters[window - 1:], smooth, lw=1.6, label=f"window-{window} mean")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    _save(fig, path)


def save_curve(curve: EvalCurve, path) -> None:
    """An evaluation curve with its scalar summary in the title."""
    xlabel, ylabel = _CURVE_LABELS.get(curve.kind, ("x", "y"))
    fig, ax = _new_axes(f"{curve.kind} (summary {curve.summary:.4f})")
    if curve.points:
        xs, ys = zip(*curve.points)
        ax.plot(xs, ys, lw=1.4)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if curve.kind == "pr":
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.02)
    _save(fig, path)


def save_size_histogram(hist: SizeHistogram, path) -> None:
    fig, ax = _new_axes("face sizes")
    xs = np.arange(len(hist.counts))
    ax.bar(xs, hist.fractions, color="#4878a8")
    ax.set_xticks(xs, hist.labels)
    ax.set_xlabel("size bucket (px)")
    ax.set_ylabel("fraction of faces")
    for x, frac in zip(xs, hist.fractions):
        ax.text(x, frac, f"{frac:.1%}", ha="center", va="bottom", fontsize=8)
    _save(fig, path)


def save_activation_histograms(layer_hists, path, max_panels: int = 12) -> None:
    """Per-layer value histograms on one canvas.

    ``layer_hists`` maps layer name -> (bin_edges, counts).
    """
    names = list(layer_hists)[:max_panels]
    cols = 3
    rows = max(1, (len(names) + cols - 1) // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows), dpi=120)
    axes = np.atleast_1d(axes).ravel()
    for ax in axes[len(names):]:
        ax.axis("off")
    for ax, name in zip(axes, names):
        edges, counts = layer_hists[name]
        centers = 0.5 * (edges[:-1] + edges[1:])
        ax.fill_between(centers, counts, step="mid", color="#4878a8", alpha=0.8)
        ax.set_title(name, fontsize=8)
        ax.tick_params(labelsize=7)
    _save(fig, path)


def save_detections(image_chw: np.ndarray, detections, path,
                    gt_boxes=()) -> None:
    """The image with predicted (and optionally ground-truth) boxes."""
    img = np.asarray(image_chw)
    fig, ax = plt.subplots(figsize=(5.0, 5.0), dpi=120)
    if img.shape[0] == 1:
        ax.imshow(img[0], cmap="gray", vmin=0.0, vmax=1.0)
    else:
        ax.imshow(img.transpose(1, 2, 0))
    for b in gt_boxes:
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.w, b.h, fill=False,
                                   edgecolor="#50b050", lw=1.2, ls="--"))
    for d in detections:
        b = d.box
        ax.add_patch(plt.Rectangle((b.x1, b.y1), b.w, b.h, fill=False,
                                   edgecolor="#e05050", lw=1.2))
        ax.text(b.x1, b.y1 - 1, f"{d.score:.2f}", color="#e05050", fontsize=7)
    ax.set_axis_off()
    _save(fig, path)
