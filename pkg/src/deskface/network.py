"""Encoder-decoder detector assembled from a declarative spec.

The encoder is a stack of stages (conv/batchnorm/relu/maxpool layers); a
subset of stage outputs ("taps") feed the decoder.  The decoder walks top
down: the deepest tap is batch-normalized and predicted on directly, and
each shallower hierarchy is produced by fusing the deeper result into the
tap — upsample the deep branch with a learned 2x deconvolution, adjust the
shallow branch's channels with one convolution (mode B) or a three-conv
stack (mode A), normalize both branches, and sum them.  Every fused
hierarchy gets a prediction head of two parallel 3x3 convolutions emitting
per-anchor class logits and offsets.

Intermediate activations can be captured by passing a ``collect`` dict to
the forward functions; keys are layer names, plus ``fuse{k}.deep_branch``
and ``fuse{k}.shallow_branch`` for the two normalized inputs of each sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, ValidationError
from .geometry import AnchorParams, AnchorSet, generate_anchors
from .tensor import (
    BatchNormState,
    Parameter,
    Tensor,
    batch_norm,
    concat,
    conv2d,
    deconv2d,
    eltwise_add,
    maxpool2d,
    permute,
    relu,
    reshape,
)

LAYER_KINDS = ("conv", "deconv", "maxpool", "batchnorm", "relu")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    k: int = 0
    s: int = 1
    p: int = 0
    cout: int = 0

    def problems(self) -> list[str]:
        out = []
        if self.kind not in LAYER_KINDS:
            out.append(f"unknown layer kind {self.kind!r}")
            return out
        if self.kind in ("conv", "deconv"):
            if self.k < 1 or self.s < 1 or self.p < 0 or self.cout < 1:
                out.append(f"illegal {self.kind} hyperparameters: {self}")
        elif self.kind == "maxpool":
            if self.k < 1 or self.s < 1:
                out.append(f"illegal maxpool hyperparameters: {self}")
        return out


def conv3(cout: int) -> LayerSpec:
    return LayerSpec("conv", k=3, s=1, p=1, cout=cout)


def bn() -> LayerSpec:
    return LayerSpec("batchnorm")


def relu_layer() -> LayerSpec:
    return LayerSpec("relu")


def pool2() -> LayerSpec:
    return LayerSpec("maxpool", k=2, s=2)


def conv_stage(channels: Sequence[int]) -> tuple[LayerSpec, ...]:
    """conv3x3-BN-ReLU per entry, closed by a 2x2/2 max pool."""
    layers: list[LayerSpec] = []
    for c in channels:
        layers += [conv3(c), bn(), relu_layer()]
    layers.append(pool2())
    return tuple(layers)


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative description of the whole detector."""

    input_size: int
    in_channels: int
    stages: tuple[tuple[LayerSpec, ...], ...]
    taps: tuple[int, ...]          # 0-based stage indices, shallow to deep
    fusion_mode: str               # "A" | "B"
    fuse_channels: int
    anchor_params: AnchorParams

    @property
    def n_hierarchies(self) -> int:
        return len(self.taps)

    @property
    def boxes_per_cell(self) -> int:
        return self.anchor_params.boxes_per_cell

    @property
    def head_channels(self) -> tuple[int, int]:
        """(confidence, localization) output channels per head."""
        a = self.boxes_per_cell
        return 2 * a, 4 * a

    def encoder_layers(self):
        """Yield (name, LayerSpec, stage_index) over encoder layers in order.

        Names follow the stage convention enc{S}.{kind}{i} with 1-based
        counters, e.g. enc3.conv3 for the third conv of the third stage.
        """
        for si, stage in enumerate(self.stages):
            counters: dict[str, int] = {}
            for layer in stage:
                short = {"conv": "conv", "deconv": "deconv", "maxpool": "pool",
                         "batchnorm": "bn", "relu": "relu"}[layer.kind]
                counters[short] = counters.get(short, 0) + 1
                yield f"enc{si + 1}.{short}{counters[short]}", layer, si

    def stage_channels(self) -> list[int]:
        """Output channel count after each stage."""
        c = self.in_channels
        out = []
        for stage in self.stages:
            for layer in stage:
                if layer.kind in ("conv", "deconv"):
                    c = layer.cout
            out.append(c)
        return out

    def stage_spatial(self) -> list[int]:
        """Spatial size after each stage, or -1 once a layer is infeasible."""
        size = self.input_size
        out = []
        for stage in self.stages:
            for layer in stage:
                if size <= 0:
                    break
                if layer.kind == "conv":
                    size = (size + 2 * layer.p - layer.k) // layer.s + 1 \
                        if size + 2 * layer.p >= layer.k else -1
                elif layer.kind == "deconv":
                    size = (size - 1) * layer.s + layer.k - 2 * layer.p
                elif layer.kind == "maxpool":
                    size = (size - layer.k) // layer.s + 1 if size >= layer.k else -1
            out.append(size)
        return out

    def tap_dims(self) -> list[tuple[int, int]]:
        """(channels, spatial) at every tap, shallow to deep."""
        chans = self.stage_channels()
        spats = self.stage_spatial()
        return [(chans[t], spats[t]) for t in self.taps]

    def validate(self) -> list[str]:
        problems: list[str] = []
        if self.input_size < 1:
            problems.append("input size must be positive")
        if self.in_channels < 1:
            problems.append("input channels must be positive")
        if self.fusion_mode not in ("A", "B"):
            problems.append(f"fusion mode must be 'A' or 'B', got {self.fusion_mode!r}")
        if self.fuse_channels < 1:
            problems.append("fuse channels must be positive")
        for name, layer, _ in self.encoder_layers():
            for p in layer.problems():
                problems.append(f"{name}: {p}")
        if len(self.taps) < 2:
            problems.append("at least 2 tap points are required")
        if any(t < 0 or t >= len(self.stages) for t in self.taps):
            problems.append("tap indices must reference existing stages")
            return problems
        if list(self.taps) != sorted(set(self.taps)):
            problems.append("tap indices must be strictly increasing")
        spats = self.stage_spatial()
        if any(s <= 0 for s in spats):
            problems.append("a layer shrinks the feature map below 1 pixel")
            return problems
        for a, b in zip(self.taps, self.taps[1:]):
            if spats[a] != 2 * spats[b]:
                problems.append(
                    f"taps {a} and {b} differ by {spats[a]}/{spats[b]}, "
                    "expected exactly one 2x upsampling step"
                )
        if self.anchor_params.l != len(self.taps):
            problems.append(
                f"anchor params define {self.anchor_params.l} hierarchies "
                f"but the spec taps {len(self.taps)}"
            )
        if self.anchor_params.d_min != self.input_size:
            problems.append("anchor d_min must equal the network input size")
        return problems


@dataclass(frozen=True)
class HierarchyOutput:
    """One hierarchy's raw head outputs plus its default boxes."""

    k: int
    conf: Tensor = field(repr=False)   # (N, 2A, H, W)
    loc: Tensor = field(repr=False)    # (N, 4A, H, W)
    anchors: AnchorSet


class _FuseBlock:
    __slots__ = ("deconv", "adjust", "bn_deep", "bn_shallow")

    def __init__(self, deconv, adjust, bn_deep, bn_shallow):
        self.deconv = deconv        # Parameter
        self.adjust = adjust        # list of (w, bias or None, bn triple or None)
        self.bn_deep = bn_deep      # (gamma, beta, state_name)
        self.bn_shallow = bn_shallow


class _Head:
    __slots__ = ("conf_w", "conf_b", "loc_w", "loc_b")

    def __init__(self, conf_w, conf_b, loc_w, loc_b):
        self.conf_w = conf_w
        self.conf_b = conf_b
        self.loc_w = loc_w
        self.loc_b = loc_b


class Model:
    """Parameters, running statistics and topology of one detector."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        self.params: dict[str, Parameter] = {}
        self.bn_states: dict[str, BatchNormState] = {}
        self.training = False
        self.iteration = 0
        self.rng_seed: int | None = None
        self._fuse_blocks: list[_FuseBlock] = []
        self._heads: list[_Head] = []
        self._top_bn: tuple | None = None
        self._zero_bias: dict[int, Tensor] = {}

    def zero_bias(self, channels: int) -> Tensor:
        """A shared constant zero bias for layers built without one."""
        if channels not in self._zero_bias:
            self._zero_bias[channels] = Tensor(np.zeros(channels))
        return self._zero_bias[channels]

    def bias_for(self, name: str, channels: int) -> Tensor:
        param = self.params.get(f"{name}.b")
        return param.value if param is not None else self.zero_bias(channels)

    @property
    def mode(self) -> str:
        return "train" if self.training else "infer"

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.value.zero_grad()

    def anchor_sets(self) -> list[AnchorSet]:
        size = float(self.spec.input_size)
        return [
            generate_anchors(k, (s, s), (size, size), self.spec.anchor_params)
            for k, (_, s) in enumerate(self.spec.tap_dims())
        ]


def _he_weights(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


def build_network(spec: NetworkSpec, seed: int) -> Model:
    """Validate the spec and deterministically initialize every parameter.

    Weights are He-style fan-in scaled Gaussians drawn in a fixed order
    from a generator seeded with ``seed``; biases start at zero and batch
    norm at identity, so the same seed rebuilds bit-identical parameters.
    """
    problems = spec.validate()
    if problems:
        raise ValidationError(problems)
    rng = np.random.default_rng(seed)
    model = Model(spec)

    def add(name: str, value: np.ndarray) -> Parameter:
        param = Parameter(name, value)
        model.params[name] = param
        return param

    def add_bn(base: str, channels: int) -> tuple:
        gamma = add(f"{base}.gamma", np.ones(channels))
        beta = add(f"{base}.beta", np.zeros(channels))
        model.bn_states[base] = BatchNormState(channels)
        return gamma, beta, base

    # A conv bias feeding straight into batch norm is normalized away, so
    # convs in that position are built without one.
    flat_layers = list(spec.encoder_layers())
    cin = spec.in_channels
    for i, (name, layer, _) in enumerate(flat_layers):
        if layer.kind == "conv":
            add(f"{name}.w", _he_weights(rng, (layer.cout, cin, layer.k, layer.k),
                                         cin * layer.k * layer.k))
            followed_by_bn = (
                i + 1 < len(flat_layers)
                and flat_layers[i + 1][1].kind == "batchnorm"
            )
            if not followed_by_bn:
                add(f"{name}.b", np.zeros(layer.cout))
            cin = layer.cout
        elif layer.kind == "deconv":
            add(f"{name}.w", _he_weights(rng, (cin, layer.cout, layer.k, layer.k),
                                         cin * layer.k * layer.k))
            cin = layer.cout
        elif layer.kind == "batchnorm":
            add_bn(name, cin)

    tap_dims = spec.tap_dims()
    l = spec.n_hierarchies
    deep_ch = tap_dims[-1][0]
    model._top_bn = add_bn("top.bn", deep_ch)

    fuse = spec.fuse_channels
    blocks: list[_FuseBlock] = []
    incoming = deep_ch
    for k in range(l - 2, -1, -1):
        base = f"fuse{k}"
        deconv = add(f"{base}.deconv.w",
                     _he_weights(rng, (incoming, fuse, 2, 2), incoming * 4))
        shallow_ch = tap_dims[k][0]
        widths = [fuse] if spec.fusion_mode == "B" else [fuse, fuse, fuse]
        adjust = []
        c = shallow_ch
        for i, cout in enumerate(widths, start=1):
            w = add(f"{base}.adj{i}.w", _he_weights(rng, (cout, c, 3, 3), c * 9))
            # every adjust conv feeds a norm (its own in the mode-A stack,
            # the branch norm for the last), so none carries a bias
            inner_bn = None
            if i < len(widths):
                inner_bn = add_bn(f"{base}.adj{i}.bn", cout)
            adjust.append((w, None, inner_bn))
            c = cout
        bn_deep = add_bn(f"{base}.bn_deep", fuse)
        bn_shallow = add_bn(f"{base}.bn_shallow", fuse)
        blocks.append(_FuseBlock(deconv, adjust, bn_deep, bn_shallow))
        incoming = fuse
    model._fuse_blocks = blocks[::-1]  # index by shallow hierarchy k

    conf_ch, loc_ch = spec.head_channels
    for k in range(l):
        cin_head = deep_ch if k == l - 1 else fuse
        base = f"head{k}"
        model._heads.append(_Head(
            add(f"{base}.conf.w", _he_weights(rng, (conf_ch, cin_head, 3, 3),
                                              cin_head * 9)),
            add(f"{base}.conf.b", np.zeros(conf_ch)),
            add(f"{base}.loc.w", _he_weights(rng, (loc_ch, cin_head, 3, 3),
                                             cin_head * 9)),
            add(f"{base}.loc.b", np.zeros(loc_ch)),
        ))
    return model


def _apply_bn(model: Model, h: Tensor, bn_triple, collect=None, tag=None) -> Tensor:
    gamma, beta, state_name = bn_triple
    out = batch_norm(h, gamma.value, beta.value, model.mode,
                     model.bn_states[state_name])
    if collect is not None and tag is not None:
        collect[tag] = out.data
    return out


def _run_encoder(model: Model, image: Tensor, collect=None, upto: str | None = None,
                 grab=None):
    spec = model.spec
    if image.data.ndim != 4:
        raise DimensionError("encoder expects an NCHW input")
    n, c, h, w = image.data.shape
    if c != spec.in_channels or h != spec.input_size or w != spec.input_size:
        raise DimensionError(
            f"input must be (*, {spec.in_channels}, {spec.input_size}, "
            f"{spec.input_size}), got {image.data.shape}"
        )
    taps_wanted = set(spec.taps)
    cur = image
    taps: list[Tensor] = []
    stage_of_layer = list(spec.encoder_layers())
    idx = 0
    for si, stage in enumerate(spec.stages):
        for _ in stage:
            name, layer, _si = stage_of_layer[idx]
            idx += 1
            if layer.kind == "conv":
                cur = conv2d(cur, model.params[f"{name}.w"].value,
                             model.bias_for(name, layer.cout), layer.s, layer.p)
            elif layer.kind == "deconv":
                cur = deconv2d(cur, model.params[f"{name}.w"].value, layer.s, layer.p)
            elif layer.kind == "maxpool":
                cur = maxpool2d(cur, layer.k, layer.s)
            elif layer.kind == "batchnorm":
                gamma = model.params[f"{name}.gamma"]
                beta = model.params[f"{name}.beta"]
                cur = batch_norm(cur, gamma.value, beta.value, model.mode,
                                 model.bn_states[name])
            elif layer.kind == "relu":
                cur = relu(cur)
            if collect is not None:
                collect[name] = cur.data
            if grab is not None:
                grab[name] = cur
            if upto is not None and name == upto:
                return taps, cur, True
        if si in taps_wanted:
            taps.append(cur)
    return taps, cur, upto is None


def forward_encoder(model: Model, image: Tensor, collect=None,
                    grab=None) -> list[Tensor]:
    """Run the encoder and return the tapped features, shallow to deep."""
    taps, _, _ = _run_encoder(model, image, collect, grab=grab)
    return taps


def forward_upto(model: Model, image: Tensor, layer: str) -> Tensor:
    """Run the encoder just far enough to return the named layer's output."""
    _, out, found = _run_encoder(model, image, None, upto=layer)
    if not found:
        raise KeyError(f"unknown encoder layer {layer!r}")
    return out


def context_fuse(
    deep: Tensor,
    shallow: Tensor,
    mode: str,
    block: _FuseBlock,
    model: Model,
    collect=None,
    k: int | None = None,
    grab=None,
) -> Tensor:
    """Upsample the deep branch, adjust the shallow one, normalize, sum."""

    def note(tag, tensor):
        if k is None:
            return
        if collect is not None:
            collect[f"fuse{k}.{tag}"] = tensor.data
        if grab is not None:
            grab[f"fuse{k}.{tag}"] = tensor

    up = deconv2d(deep, block.deconv.value, 2, 0)
    note("deconv", up)
    if up.data.shape[2:] != shallow.data.shape[2:]:
        raise DimensionError(
            f"fusion shape mismatch after upsampling: {up.data.shape} "
            f"vs {shallow.data.shape}"
        )
    side = shallow
    for i, (w, b, inner_bn) in enumerate(block.adjust, start=1):
        bias = b.value if b is not None else model.zero_bias(w.value.dims[0])
        side = conv2d(side, w.value, bias, 1, 1)
        note(f"adj{i}", side)
        if inner_bn is not None:  # interior of the mode-A stack
            side = relu(_apply_bn(model, side, inner_bn))
    tag_deep = f"fuse{k}.deep_branch" if k is not None else None
    tag_shallow = f"fuse{k}.shallow_branch" if k is not None else None
    a = _apply_bn(model, up, block.bn_deep, collect, tag_deep)
    b_ = _apply_bn(model, side, block.bn_shallow, collect, tag_shallow)
    fused = eltwise_add(a, b_)
    note("sum", fused)
    return fused


def predict(
    fused: Tensor,
    k: int,
    head: _Head,
    anchor_params: AnchorParams,
    image_dims: tuple[float, float],
) -> HierarchyOutput:
    """Run the two head convolutions and generate this hierarchy's anchors."""
    conf = conv2d(fused, head.conf_w.value, head.conf_b.value, 1, 1)
    loc = conv2d(fused, head.loc_w.value, head.loc_b.value, 1, 1)
    n, _, hh, ww = fused.data.shape
    anchors = generate_anchors(k, (ww, hh), image_dims, anchor_params)
    return HierarchyOutput(k=k, conf=conf, loc=loc, anchors=anchors)


def forward_detect(model: Model, image: Tensor, collect=None,
                   grab=None) -> list[HierarchyOutput]:
    """Encoder, top-down fusion, then one prediction per hierarchy.

    The returned list is ordered shallow to deep; the deepest hierarchy
    predicts on its normalized encoder feature alone.  ``collect`` captures
    named activations as arrays, ``grab`` the live tensors (for probes that
    need to differentiate from an intermediate).
    """
    spec = model.spec
    taps = forward_encoder(model, image, collect, grab=grab)
    l = spec.n_hierarchies
    fused: list = [None] * l
    fused[l - 1] = _apply_bn(model, taps[-1], model._top_bn, collect, "top.bn")
    if grab is not None:
        grab["top.bn"] = fused[l - 1]
    for k in range(l - 2, -1, -1):
        fused[k] = context_fuse(fused[k + 1], taps[k], spec.fusion_mode,
                                model._fuse_blocks[k], model, collect, k, grab)
    size = float(spec.input_size)
    outs = [
        predict(fused[k], k, model._heads[k], spec.anchor_params, (size, size))
        for k in range(l)
    ]
    if grab is not None:
        for out in outs:
            grab[f"head{out.k}.conf"] = out.conf
            grab[f"head{out.k}.loc"] = out.loc
    return outs


def flatten_hierarchies(outputs: Sequence[HierarchyOutput]) -> tuple[Tensor, Tensor]:
    """Stack head outputs into (N, M, 2) logits and (N, M, 4) offsets.

    The flattened anchor order is hierarchy-major, then cell row-major,
    then ratio slot — exactly the order of the concatenated anchor sets.
    """
    confs = []
    locs = []
    for out in outputs:
        n, c2, h, w = out.conf.dims
        a = c2 // 2
        conf = reshape(out.conf, (n, a, 2, h, w))
        conf = permute(conf, (0, 3, 4, 1, 2))
        confs.append(reshape(conf, (n, h * w * a, 2)))
        loc = reshape(out.loc, (n, a, 4, h, w))
        loc = permute(loc, (0, 3, 4, 1, 2))
        locs.append(reshape(loc, (n, h * w * a, 4)))
    return concat(confs, axis=1), concat(locs, axis=1)


# ---------------------------------------------------------------------------
# reference configurations
# ---------------------------------------------------------------------------


def desk_spec(fusion_mode: str = "B", input_size: int = 128,
              in_channels: int = 1) -> NetworkSpec:
    """Default CPU-scale detector: 4 stages, 3 fused hierarchies.

    Strides 4/8/16 with box sizes 10/27/44 px cover faces of roughly
    8-48 px at a 128 px input.
    """
    scale = input_size / 128.0
    return NetworkSpec(
        input_size=input_size,
        in_channels=in_channels,
        stages=(
            conv_stage([8]),
            conv_stage([16, 16]),
            conv_stage([32, 32]),
            conv_stage([64, 64]),
        ),
        taps=(1, 2, 3),
        fusion_mode=fusion_mode,
        fuse_channels=32,
        anchor_params=AnchorParams(
            rf_sizes=(10.0 * scale, 27.0 * scale, 44.0 * scale),
            d_min=float(input_size),
        ),
    )


def vgg16_spec(input_size: int = 512) -> NetworkSpec:
    """VGG-16-shaped encoder for shape and receptive-field checks only."""
    return NetworkSpec(
        input_size=input_size,
        in_channels=3,
        stages=(
            conv_stage([64, 64]),
            conv_stage([128, 128]),
            conv_stage([256, 256, 256]),
            conv_stage([512, 512, 512]),
            conv_stage([512, 512, 512]),
        ),
        taps=(2, 3, 4),
        fusion_mode="B",
        fuse_channels=256,
        anchor_params=AnchorParams(
            rf_sizes=(10.24, 20.48, 30.72),
            d_min=float(input_size),
        ),
    )


def toy_spec(fusion_mode: str = "B") -> NetworkSpec:
    """Smallest end-to-end network: 64 px input, two hierarchies."""
    return NetworkSpec(
        input_size=64,
        in_channels=1,
        stages=(
            conv_stage([2]),
            conv_stage([4]),
        ),
        taps=(0, 1),
        fusion_mode=fusion_mode,
        fuse_channels=4,
        anchor_params=AnchorParams(rf_sizes=(8.0, 16.0), d_min=64.0),
    )
