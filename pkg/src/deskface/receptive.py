"""Receptive-field calculus and a gradient-mass effective-RF estimator.

Theoretical receptive fields fold the classic per-layer recurrence
rf' = rf + (k-1)*jump, jump' = jump*s over a layer prefix; deconvolution
divides the jump instead, so states are kept as exact rationals.  The
effective receptive field is measured, not derived: backpropagate a unit
adjoint from a layer's center unit over random inputs and report the
smallest centered square holding a given fraction of the mean absolute
input gradient.  Measured fields are always contained in theoretical ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .errors import ContractError
from .network import Model, NetworkSpec, forward_detect, forward_upto
from .tensor import Tape, Tensor, backward, pick


@dataclass(frozen=True)
class RFState:
    """Receptive-field size, output grid spacing, and first-cell center."""

    rf: Fraction
    jump: Fraction
    start: Fraction

    @staticmethod
    def initial() -> "RFState":
        return RFState(rf=Fraction(1), jump=Fraction(1), start=Fraction(1, 2))


def fold_layer(state: RFState, kind: str, k: int = 0, s: int = 1, p: int = 0) -> RFState:
    """Advance the state through one layer.

    conv and maxpool share the downsampling rule; deconv refines the grid
    (jump divides by the stride) and grows the field by the transposed
    kernel extent at the refined spacing.  batchnorm/relu are identity.
    """
    if kind in ("batchnorm", "relu"):
        return state
    if kind in ("conv", "maxpool"):
        rf = state.rf + (k - 1) * state.jump
        start = state.start + (Fraction(k - 1, 2) - p) * state.jump
        return RFState(rf=rf, jump=state.jump * s, start=start)
    if kind == "deconv":
        jump = state.jump / s
        rf = state.rf + (k - 1) * jump
        start = state.start - (Fraction(k - 1, 2) - p) * jump
        return RFState(rf=rf, jump=jump, start=start)
    raise ContractError(f"unknown layer kind {kind!r}")


def _decoder_states(spec: NetworkSpec, tap_states: list[RFState]):
    """States for decoder layers, fusing branches by the larger field."""
    out: dict[str, RFState] = {}
    l = spec.n_hierarchies
    out["top.bn"] = tap_states[-1]
    fused = tap_states[-1]
    for k in range(l - 2, -1, -1):
        deep = fold_layer(fused, "deconv", k=2, s=2, p=0)
        out[f"fuse{k}.deconv"] = deep
        shallow = tap_states[k]
        n_adj = 1 if spec.fusion_mode == "B" else 3
        for i in range(1, n_adj + 1):
            shallow = fold_layer(shallow, "conv", k=3, s=1, p=1)
            out[f"fuse{k}.adj{i}"] = shallow
        if deep.jump != shallow.jump:
            raise ContractError("fusion branches disagree on grid spacing")
        fused = deep if deep.rf >= shallow.rf else shallow
        out[f"fuse{k}.sum"] = fused
        out[f"head{k}.conf"] = fold_layer(fused, "conv", k=3, s=1, p=1)
        out[f"head{k}.loc"] = out[f"head{k}.conf"]
    out[f"head{l - 1}.conf"] = fold_layer(tap_states[-1], "conv", k=3, s=1, p=1)
    out[f"head{l - 1}.loc"] = out[f"head{l - 1}.conf"]
    return out


def trf_table(spec: NetworkSpec) -> list[tuple[str, RFState]]:
    """(layer name, state) for every layer, encoder first, then decoder."""
    rows: list[tuple[str, RFState]] = []
    state = RFState.initial()
    tap_states: list[RFState] = []
    per_stage: list[RFState] = []
    for name, layer, si in spec.encoder_layers():
        state = fold_layer(state, layer.kind, layer.k, layer.s, layer.p)
        rows.append((name, state))
        while len(per_stage) <= si:
            per_stage.append(state)
        per_stage[si] = state
    tap_states = [per_stage[t] for t in spec.taps]
    decoder = _decoder_states(spec, tap_states)
    rows.extend(decoder.items())
    return rows


def trf_compute(spec: NetworkSpec, upto_layer: str) -> RFState:
    """Theoretical receptive field of the named layer's units."""
    for name, state in trf_table(spec):
        if name == upto_layer:
            return state
    raise KeyError(f"unknown layer {upto_layer!r}")


def erf_estimate(
    model: Model,
    layer: str,
    mass: float = 0.95,
    trials: int = 8,
    seed: int = 0,
) -> float:
    """Effective receptive field of an encoder layer, as a square half-width.

    Over ``trials`` standard-normal inputs, a unit adjoint is pushed from
    the layer's center unit (channel 0) back to the input; the result is
    the smallest half-width r such that the square of side 2r+1, centered
    on the unit's theoretical input projection, holds ``mass`` of the mean
    absolute gradient.
    """
    if not 0.0 < mass < 1.0:
        raise ContractError("mass must lie in (0, 1)")
    if trials < 1:
        raise ContractError("at least one trial is required")
    spec = model.spec
    size = spec.input_size
    encoder_names = {name for name, _, _ in spec.encoder_layers()}
    heat = np.zeros((size, size), dtype=np.float64)
    center_unit = None
    was_training = model.training
    model.training = False  # keep running statistics untouched by probes
    try:
        for t in range(trials):
            rng = np.random.default_rng([seed, t])
            x = Tensor(rng.standard_normal((1, spec.in_channels, size, size)),
                       requires_grad=True)
            with Tape() as tape:
                if layer in encoder_names:
                    out = forward_upto(model, x, layer)
                else:
                    grabbed: dict = {}
                    forward_detect(model, x, grab=grabbed)
                    if layer not in grabbed:
                        raise KeyError(f"unknown layer {layer!r}")
                    out = grabbed[layer]
                _, _, oh, ow = out.data.shape
                center_unit = (oh // 2, ow // 2)
                backward(pick(out, (0, 0, oh // 2, ow // 2)), tape)
            if x.grad is None:
                raise ContractError(
                    f"layer {layer!r} is not differentiable to the input")
            heat += np.abs(x.grad).sum(axis=(0, 1))
    finally:
        model.training = was_training
    heat /= trials
    total = heat.sum()
    if total <= 0.0:
        return 0.0

    state = trf_compute(spec, layer)
    ci = int(round(float(state.start + center_unit[0] * state.jump)))
    cj = int(round(float(state.start + center_unit[1] * state.jump)))
    ci = min(max(ci, 0), size - 1)
    cj = min(max(cj, 0), size - 1)
    target = mass * total
    for r in range(size):
        window = heat[max(ci - r, 0): ci + r + 1, max(cj - r, 0): cj + r + 1]
        if window.sum() >= target:
            return float(r)
    return float(size - 1)
