"""Minimal reverse-mode autodiff engine over float64 NumPy arrays.

The design is a dynamic tape: operations executed while a :class:`Tape` is
active append one node each, in execution order.  Because the graph is
define-by-run, execution order is already a topological order, so the
backward pass is a single reverse sweep that visits every node exactly once.

Layout convention is NCHW for rank-4 tensors.  All computation is float64;
every operation checks its output for NaN/Inf and raises
:class:`~deskface.errors.NumericError` on the first non-finite value.

Tensors are immutable after construction except for gradient accumulation.
A tape and the tensors recorded on it belong to one logical thread;
independent tapes may run concurrently (the active-tape stack is
thread-local).
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


class Tensor:
    """A rank-N float64 array, optionally carrying a gradient buffer.

    The gradient buffer is allocated lazily: leaves created through
    :class:`Parameter` get zeros up front, intermediates get theirs on
    first accumulation during :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, _lazy_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # preserves 0-d, unlike a bare call
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad and not _lazy_grad else None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out", "pulls")

    def __init__(self, out: Tensor, pulls):
        self.out = out
        self.pulls = pulls


class Tape:
    """Ordered record of executed operations, replayable in reverse.

    Also the extension point for composite operations: anything can append
    a node via :meth:`record`, supplying one adjoint-pull function per
    differentiable input.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _tape_stack().pop()
        return False

    @staticmethod
    def active() -> "Tape | None":
        stack = _tape_stack()
        return stack[-1] if stack else None

    def record(self, out: Tensor, pulls: Sequence[tuple[Tensor, Callable]]) -> None:
        """Append a node: ``pulls`` maps the output adjoint to each input."""
        self.nodes.append(_Node(out, list(pulls)))


class Parameter:
    """A named trainable tensor plus its momentum buffer."""

    __slots__ = ("name", "value", "momentum_buffer")

    def __init__(self, name: str, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.momentum_buffer = Tensor(np.zeros_like(self.value.data))

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, dims={self.value.dims})"


class BatchNormState:
    """Running mean/variance for one normalization layer.

    ``momentum`` weights the old running value: new = m*old + (1-m)*batch.
    """

    __slots__ = ("running_mean", "running_var", "momentum", "eps")

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.momentum = momentum
        self.eps = eps


def _check_finite(arr: np.ndarray, op: str) -> None:
    # A single fused reduction: any NaN/Inf in the input leaves the sum
    # non-finite, at a fraction of the cost of isfinite().all().
    if not np.isfinite(arr.sum()):
        raise NumericError(f"{op} produced a non-finite value")


def _finish(op: str, data: np.ndarray, pulls) -> Tensor:
    """Wrap an op result; record it when a tape is active and grads flow."""
    _check_finite(data, op)
    tape = Tape.active()
    needs = tape is not None and any(t.requires_grad for t, _ in pulls)
    out = Tensor(data, requires_grad=needs, _lazy_grad=True)
    if needs:
        tape.record(out, [(t, fn) for t, fn in pulls if t.requires_grad])
    return out


# ---------------------------------------------------------------------------
# layer vocabulary
# ---------------------------------------------------------------------------


def _patch_view(xp: np.ndarray, kh: int, kw: int, stride: int, oh: int, ow: int):
    """(N,C,KH,KW,OH,OW) sliding-window view over a padded NCHW array."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
        writeable=False,
    )


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlate ``x`` (N,C,H,W) with ``w`` (OC,C,KH,KW) plus bias."""
    if x.data.ndim != 4 or w.data.ndim != 4 or b.data.ndim != 1:
        raise DimensionError("conv2d expects rank-4 input/weight and rank-1 bias")
    if stride < 1 or pad < 0:
        raise ContractError("conv2d requires stride >= 1 and pad >= 0")
    n, c, h, wd = x.data.shape
    oc, wc, kh, kw = w.data.shape
    if wc != c:
        raise DimensionError(f"conv2d channel mismatch: input {c}, weight {wc}")
    if b.data.shape[0] != oc:
        raise DimensionError("conv2d bias length must equal output channels")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise DimensionError("conv2d kernel larger than padded input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    view = _patch_view(xp, kh, kw, stride, oh, ow)
    # One materialized im2col matrix drives the forward gemm and is reused
    # by the weight-gradient gemm.
    cols = np.ascontiguousarray(view.transpose(1, 2, 3, 0, 4, 5)).reshape(
        c * kh * kw, n * oh * ow
    )
    wmat = w.data.reshape(oc, c * kh * kw)
    y = (wmat @ cols).reshape(oc, n, oh, ow)
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    y += b.data[None, :, None, None]

    hp, wp = xp.shape[2], xp.shape[3]

    def _gmat(g):
        return np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(oc, n * oh * ow)

    def pull_x(g):
        gcols = (wmat.T @ _gmat(g)).reshape(c, kh, kw, n, oh, ow)
        gxp = np.zeros((n, c, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += (
                    gcols[:, i, j].transpose(1, 0, 2, 3)
                )
        if pad:
            return gxp[:, :, pad : pad + h, pad : pad + wd]
        return gxp

    def pull_w(g):
        return (_gmat(g) @ cols.T).reshape(oc, c, kh, kw)

    def pull_b(g):
        return g.sum(axis=(0, 2, 3))

    return _finish("conv2d", y, [(x, pull_x), (w, pull_w), (b, pull_b)])


def deconv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution of ``x`` (N,C,H,W) with ``w`` (C,OC,KH,KW).

    Output spatial size is (in-1)*stride + k - 2*pad; the input gradient is
    a forward correlation of the upstream adjoint with the same kernel.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise DimensionError("deconv2d expects rank-4 input and weight")
    if stride < 1 or pad < 0:
        raise ContractError("deconv2d requires stride >= 1 and pad >= 0")
    n, c, h, wd = x.data.shape
    wc, oc, kh, kw = w.data.shape
    if wc != c:
        raise DimensionError(f"deconv2d channel mismatch: input {c}, weight {wc}")
    hfull = (h - 1) * stride + kh
    wfull = (wd - 1) * stride + kw
    oh, ow = hfull - 2 * pad, wfull - 2 * pad
    if oh < 1 or ow < 1:
        raise DimensionError("deconv2d padding consumes the whole output")

    xmat = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(c, n * h * wd)
    wmat = w.data.reshape(c, oc * kh * kw)
    ycols = (wmat.T @ xmat).reshape(oc, kh, kw, n, h, wd)
    ypad = np.zeros((n, oc, hfull, wfull), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            ypad[:, :, i : i + h * stride : stride, j : j + wd * stride : stride] += (
                ycols[:, i, j].transpose(1, 0, 2, 3)
            )
    y = np.ascontiguousarray(ypad[:, :, pad : pad + oh, pad : pad + ow])

    def _grad_cols(g):
        if pad:
            gp = np.zeros((n, oc, hfull, wfull), dtype=np.float64)
            gp[:, :, pad : pad + oh, pad : pad + ow] = g
        else:
            gp = g
        view = _patch_view(gp, kh, kw, stride, h, wd)
        return np.ascontiguousarray(view.transpose(1, 2, 3, 0, 4, 5)).reshape(
            oc * kh * kw, n * h * wd
        )

    def pull_x(g):
        gx = (wmat @ _grad_cols(g)).reshape(c, n, h, wd)
        return np.ascontiguousarray(gx.transpose(1, 0, 2, 3))

    def pull_w(g):
        return (xmat @ _grad_cols(g).T).reshape(c, oc, kh, kw)

    return _finish("deconv2d", y, [(x, pull_x), (w, pull_w)])


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max pooling; the adjoint routes to the argmax cell (first wins ties)."""
    if x.data.ndim != 4:
        raise DimensionError("maxpool2d expects a rank-4 input")
    if k < 1 or stride < 1:
        raise ContractError("maxpool2d requires k >= 1 and stride >= 1")
    n, c, h, w = x.data.shape
    if h < k or w < k:
        raise DimensionError("maxpool2d window larger than input")
    oh = (h - k) // stride + 1
    ow = (w - k) // stride + 1

    def taps(arr):
        for a in range(k):
            for b in range(k):
                yield arr[:, :, a : a + oh * stride : stride, b : b + ow * stride : stride]

    y = None
    for sl in taps(x.data):
        y = sl.copy() if y is None else np.maximum(y, sl, out=y)

    xdata = x.data

    def pull_x(g):
        # Route each window's adjoint to its max cell; walking taps in
        # window row-major order and masking already-claimed windows gives
        # the documented first-position tie-break without a scatter.
        gx = np.zeros((n, c, h, w), dtype=np.float64)
        claimed = np.zeros(y.shape, dtype=bool)
        for sl_x, sl_g in zip(taps(xdata), taps(gx)):
            hit = (sl_x == y) & ~claimed
            sl_g += g * hit
            claimed |= hit
        return gx

    return _finish("maxpool2d", y, [(x, pull_x)])


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    mode: str,
    state: BatchNormState,
) -> Tensor:
    """Per-channel normalization over (N,H,W) with affine gamma/beta.

    Train mode normalizes by the batch statistics and folds them into the
    running state; infer mode uses the running state.  The denominator is
    sqrt(max(var, eps)) so a healthy channel comes out with exactly unit
    variance and a zero-variance channel stays finite.
    """
    if x.data.ndim != 4:
        raise DimensionError("batch_norm expects a rank-4 input")
    n, c, h, w = x.data.shape
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise DimensionError("batch_norm gamma/beta length must equal channels")
    if mode not in ("train", "infer"):
        raise ContractError(f"batch_norm mode must be 'train' or 'infer', got {mode!r}")
    eps = state.eps

    if mode == "train":
        m = n * h * w
        if m < 2:
            raise ContractError("batch_norm train mode needs batch*H*W >= 2")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        mom = state.momentum
        state.running_mean = mom * state.running_mean + (1.0 - mom) * mu
        state.running_var = mom * state.running_var + (1.0 - mom) * var
    else:
        mu = state.running_mean
        var = state.running_var

    denom = np.sqrt(np.maximum(var, eps))
    xhat = (x.data - mu[None, :, None, None]) / denom[None, :, None, None]
    y = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    live = (var > eps).astype(np.float64)  # channels where var feeds the denom

    def pull_x(g):
        gxhat = g * gamma.data[None, :, None, None]
        if mode == "infer":
            return gxhat / denom[None, :, None, None]
        mean_g = gxhat.mean(axis=(0, 2, 3))
        mean_gx = (gxhat * xhat).mean(axis=(0, 2, 3))
        centered = (
            gxhat
            - mean_g[None, :, None, None]
            - (live * mean_gx)[None, :, None, None] * xhat
        )
        return centered / denom[None, :, None, None]

    def pull_gamma(g):
        return (g * xhat).sum(axis=(0, 2, 3))

    def pull_beta(g):
        return g.sum(axis=(0, 2, 3))

    return _finish(
        "batch_norm", y, [(x, pull_x), (gamma, pull_gamma), (beta, pull_beta)]
    )


def relu(x: Tensor) -> Tensor:
    """Elementwise max(x, 0); the subgradient at 0 is taken as 0."""
    y = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def pull(g):
        return g * mask

    return _finish("relu", y, [(x, pull)])


def eltwise_add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum of two same-shape tensors."""
    if a.data.shape != b.data.shape:
        raise DimensionError(
            f"eltwise_add shape mismatch: {a.data.shape} vs {b.data.shape}"
        )
    y = a.data + b.data

    def pull(g):
        return g

    return _finish("eltwise_add", y, [(a, pull), (b, pull)])


def softmax2(logits: Tensor) -> Tensor:
    """Two-way softmax along the last axis, computed with max subtraction."""
    if logits.data.shape[-1] != 2:
        raise DimensionError("softmax2 expects last dimension of size 2")
    p = softmax2_values(logits.data)

    def pull(g):
        inner = (g * p).sum(axis=-1, keepdims=True)
        return p * (g - inner)

    return _finish("softmax2", p, [(logits, pull)])


def softmax2_values(logits: np.ndarray) -> np.ndarray:
    """Plain-array version of :func:`softmax2` for non-taped consumers."""
    m = logits.max(axis=-1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# shape plumbing (needed to wire prediction heads to the loss)
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    y = x.data.reshape(shape)

    def pull(g):
        return g.reshape(old)

    return _finish("reshape", y, [(x, pull)])


def permute(x: Tensor, axes) -> Tensor:
    inverse = tuple(np.argsort(axes))
    y = np.ascontiguousarray(x.data.transpose(axes))

    def pull(g):
        return g.transpose(inverse)

    return _finish("permute", y, [(x, pull)])


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    y = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def make_pull(i):
        def pull(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return pull

    return _finish("concat", y, [(p, make_pull(i)) for i, p in enumerate(parts)])


def take_item(x: Tensor, i: int) -> Tensor:
    """Select x[i] along axis 0, dropping that axis."""
    y = x.data[i].copy()
    shape = x.data.shape

    def pull(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[i] = g
        return gx

    return _finish("take_item", y, [(x, pull)])


def pick(x: Tensor, index: tuple) -> Tensor:
    """Select a single element as a scalar tensor."""
    y = np.asarray(x.data[index], dtype=np.float64)
    shape = x.data.shape

    def pull(g):
        gx = np.zeros(shape, dtype=np.float64)
        gx[index] = g
        return gx

    return _finish("pick", y, [(x, pull)])


def scale(x: Tensor, factor: float) -> Tensor:
    y = x.data * factor

    def pull(g):
        return g * factor

    return _finish("scale", y, [(x, pull)])


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum(), dtype=np.float64)
    shape = x.data.shape

    def pull(g):
        return np.broadcast_to(g, shape)

    return _finish("sum_all", y, [(x, pull)])


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar dot product with a constant probe array (same shape as x).

    A random probe avoids the degenerate case where a symmetric reduction
    has an exactly-zero derivative, which would starve finite-difference
    comparisons of signal.
    """
    if weights.shape != x.data.shape:
        raise DimensionError("weighted_sum probe must match the input shape")
    y = np.asarray((x.data * weights).sum(), dtype=np.float64)

    def pull(g):
        return g * weights

    return _finish("weighted_sum", y, [(x, pull)])


# ---------------------------------------------------------------------------
# backward and the finite-difference oracle
# ---------------------------------------------------------------------------


def backward(output: Tensor, tape: Tape) -> None:
    """Populate gradients of everything reachable from a scalar output.

    Gradients accumulate additively, both across fan-out within one call
    and across repeated calls; callers zero parameter gradients between
    optimization steps.
    """
    if output.data.size != 1:
        raise ContractError("backward requires a scalar output")
    produced = any(node.out is output for node in tape.nodes)
    if not produced:
        raise ContractError("output was not produced on this tape")
    if output.grad is None:
        output.grad = np.ones_like(output.data)
    else:
        output.grad += 1.0
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue
        for tensor, pull in node.pulls:
            contribution = pull(g)
            if tensor.grad is None:
                tensor.grad = np.array(contribution)
            else:
                tensor.grad += contribution


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map ``x`` to a scalar tensor using taped operations.  The
    error for each component is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ContractError("grad_check requires h > 0")
    if not x.requires_grad:
        raise ContractError("grad_check requires x with requires_grad")
    x.zero_grad()
    with Tape() as tape:
        y = f(x)
        backward(y, tape)
    analytic = x.grad.copy() if x.grad is not None else np.zeros_like(x.data)

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        yp = f(x).item()
        flat[i] = orig - h
        ym = f(x).item()
        flat[i] = orig
        nflat[i] = (yp - ym) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max())
