"""Line-oriented run configuration: ``section.key = value``.

Blank lines and ``#`` comments are allowed; unknown keys are errors so
typos fail loudly.  The ``network.*`` and ``anchors.*`` sections describe
a :class:`~deskface.network.NetworkSpec` (and can be regenerated from one,
which is how checkpoints embed their architecture); ``train.*`` fills a
:class:`TrainConfig`.

Encoder stages are written one per key (``network.stage1`` ...) as a
space-separated layer list: ``conv:k,s,p,cout``, ``deconv:k,s,p,cout``,
``pool:k,s``, ``bn``, ``relu``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError, ContractError
from .geometry import AnchorParams
from .network import LayerSpec, NetworkSpec


@dataclass(frozen=True)
class TrainConfig:
    """SGD schedule and loss knobs for one training run."""

    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-5
    lr_drop_iters: tuple[int, ...] = (1200, 1800)
    lr_drop_factor: float = 0.1
    batch_size: int = 4
    total_iters: int = 2000
    seed: int = 0
    ohem_ratio: float = 3.0
    match_threshold: float = 0.5
    loss_alpha: float = 1.0
    checkpoint_every: int = 500

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        drops = tuple(self.lr_drop_iters)
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ContractError("lr drop iterations must be strictly increasing")
        if self.batch_size < 1:
            raise ContractError("batch size must be at least 1")
        if self.total_iters < 0:
            raise ContractError("total iterations cannot be negative")
        if self.ohem_ratio <= 0:
            raise ContractError("ohem ratio must be positive")
        if not 0.0 < self.match_threshold < 1.0:
            raise ContractError("match threshold must lie in (0, 1)")
        if self.loss_alpha <= 0:
            raise ContractError("loss alpha must be positive")
        if self.checkpoint_every < 0:
            raise ContractError("checkpoint interval cannot be negative")


def _parse_layer_token(token: str) -> LayerSpec:
    name, _, args = token.partition(":")
    vals = [v for v in args.split(",") if v] if args else []
    try:
        if name == "conv":
            k, s, p, c = (int(v) for v in vals)
            return LayerSpec("conv", k=k, s=s, p=p, cout=c)
        if name == "deconv":
            k, s, p, c = (int(v) for v in vals)
            return LayerSpec("deconv", k=k, s=s, p=p, cout=c)
        if name == "pool":
            k, s = (int(v) for v in vals)
            return LayerSpec("maxpool", k=k, s=s)
        if name == "bn" and not vals:
            return LayerSpec("batchnorm")
        if name == "relu" and not vals:
            return LayerSpec("relu")
    except ValueError:
        pass
    raise ConfigError(f"cannot parse layer token {token!r}")


def _layer_token(layer: LayerSpec) -> str:
    if layer.kind == "conv":
        return f"conv:{layer.k},{layer.s},{layer.p},{layer.cout}"
    if layer.kind == "deconv":
        return f"deconv:{layer.k},{layer.s},{layer.p},{layer.cout}"
    if layer.kind == "maxpool":
        return f"pool:{layer.k},{layer.s}"
    return {"batchnorm": "bn", "relu": "relu"}[layer.kind]


def parse_config_text(text: str) -> dict[str, str]:
    """Raw key/value pairs; syntax errors carry line numbers."""
    out: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if "." not in key:
            raise ConfigError(f"line {ln}: key {key!r} is missing its section")
        if key in out:
            raise ConfigError(f"line {ln}: duplicate key {key!r}")
        out[key] = value
    return out


def _pop_typed(raw: dict, key: str, kind, default=None):
    if key not in raw:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    value = raw.pop(key)
    try:
        if kind is bool:
            return value.lower() in ("1", "true", "yes")
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def _pop_floats(raw: dict, key: str, default=None):
    if key not in raw:
        if default is None:
            raise ConfigError(f"missing required key {key!r}")
        return default
    value = raw.pop(key)
    try:
        return tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {value!r}") from None


def _pop_ints(raw: dict, key: str, default=None):
    vals = _pop_floats(raw, key, default)
    if vals is default:
        return default
    out = tuple(int(v) for v in vals)
    if any(o != v for o, v in zip(out, vals)):
        raise ConfigError(f"{key!r} must hold integers")
    return out


def spec_from_config(raw: dict[str, str]) -> NetworkSpec:
    """Consume network.* and anchors.* keys into a NetworkSpec."""
    raw = dict(raw)
    input_size = _pop_typed(raw, "network.input_size", int)
    in_channels = _pop_typed(raw, "network.in_channels", int)
    stages = []
    i = 1
    while f"network.stage{i}" in raw:
        tokens = raw.pop(f"network.stage{i}").split()
        stages.append(tuple(_parse_layer_token(t) for t in tokens))
        i += 1
    if not stages:
        raise ConfigError("no network.stageN keys found")
    taps = _pop_ints(raw, "network.taps")
    fusion_mode = _pop_typed(raw, "network.fusion_mode", str)
    fuse_channels = _pop_typed(raw, "network.fuse_channels", int)
    rf_sizes = _pop_floats(raw, "anchors.rf_sizes")
    delta = _pop_typed(raw, "anchors.delta", float, 0.5)
    ratios = _pop_floats(raw, "anchors.aspect_ratios",
                         AnchorParams.__dataclass_fields__["aspect_ratios"].default)
    denom = _pop_typed(raw, "anchors.scale_denominator", str, "count-1")
    leftovers = [k for k in raw if k.startswith(("network.", "anchors."))]
    if leftovers:
        raise ConfigError(f"unknown keys: {', '.join(sorted(leftovers))}")
    try:
        params = AnchorParams(
            rf_sizes=rf_sizes,
            d_min=float(input_size),
            delta=delta,
            aspect_ratios=ratios,
            scale_denominator=denom,
        )
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    return NetworkSpec(
        input_size=input_size,
        in_channels=in_channels,
        stages=tuple(stages),
        taps=taps,
        fusion_mode=fusion_mode,
        fuse_channels=fuse_channels,
        anchor_params=params,
    )


def train_from_config(raw: dict[str, str]) -> TrainConfig:
    """Consume train.* keys into a TrainConfig (defaults fill the gaps)."""
    raw = dict(raw)
    d = TrainConfig()
    try:
        cfg = TrainConfig(
            lr0=_pop_typed(raw, "train.lr0", float, d.lr0),
            momentum=_pop_typed(raw, "train.momentum", float, d.momentum),
            weight_decay=_pop_typed(raw, "train.weight_decay", float, d.weight_decay),
            lr_drop_iters=_pop_ints(raw, "train.lr_drop_iters", d.lr_drop_iters),
            lr_drop_factor=_pop_typed(raw, "train.lr_drop_factor", float,
                                      d.lr_drop_factor),
            batch_size=_pop_typed(raw, "train.batch_size", int, d.batch_size),
            total_iters=_pop_typed(raw, "train.total_iters", int, d.total_iters),
            seed=_pop_typed(raw, "train.seed", int, d.seed),
            ohem_ratio=_pop_typed(raw, "train.ohem_ratio", float, d.ohem_ratio),
            match_threshold=_pop_typed(raw, "train.match_threshold", float,
                                       d.match_threshold),
            loss_alpha=_pop_typed(raw, "train.loss_alpha", float, d.loss_alpha),
            checkpoint_every=_pop_typed(raw, "train.checkpoint_every", int,
                                        d.checkpoint_every),
        )
    except ContractError as exc:
        raise ConfigError(str(exc)) from None
    leftovers = [k for k in raw if k.startswith("train.")]
    if leftovers:
        raise ConfigError(f"unknown keys: {', '.join(sorted(leftovers))}")
    return cfg


def load_config(text: str) -> tuple[NetworkSpec, TrainConfig]:
    """Parse a full run config; any key outside known sections is an error."""
    raw = parse_config_text(text)
    for k in raw:
        if not k.startswith(("network.", "anchors.", "train.")):
            raise ConfigError(f"unknown key {k!r}")
    spec = spec_from_config(raw)
    cfg = train_from_config(raw)
    return spec, cfg


def spec_to_config_text(spec: NetworkSpec) -> str:
    """Network and anchor sections, parseable by :func:`spec_from_config`."""
    lines = [
        f"network.input_size = {spec.input_size}",
        f"network.in_channels = {spec.in_channels}",
    ]
    for i, stage in enumerate(spec.stages, start=1):
        lines.append(f"network.stage{i} = " + " ".join(_layer_token(l) for l in stage))
    lines.append("network.taps = " + ",".join(str(t) for t in spec.taps))
    lines.append(f"network.fusion_mode = {spec.fusion_mode}")
    lines.append(f"network.fuse_channels = {spec.fuse_channels}")
    ap = spec.anchor_params
    lines.append("anchors.rf_sizes = " + ",".join(repr(v) for v in ap.rf_sizes))
    lines.append(f"anchors.delta = {ap.delta!r}")
    lines.append("anchors.aspect_ratios = " + ",".join(repr(v) for v in ap.aspect_ratios))
    lines.append(f"anchors.scale_denominator = {ap.scale_denominator}")
    return "\n".join(lines) + "\n"


def train_to_config_text(cfg: TrainConfig) -> str:
    lines = [
        f"train.lr0 = {cfg.lr0!r}",
        f"train.momentum = {cfg.momentum!r}",
        f"train.weight_decay = {cfg.weight_decay!r}",
        "train.lr_drop_iters = " + ",".join(str(v) for v in cfg.lr_drop_iters),
        f"train.lr_drop_factor = {cfg.lr_drop_factor!r}",
        f"train.batch_size = {cfg.batch_size}",
        f"train.total_iters = {cfg.total_iters}",
        f"train.seed = {cfg.seed}",
        f"train.ohem_ratio = {cfg.ohem_ratio!r}",
        f"train.match_threshold = {cfg.match_threshold!r}",
        f"train.loss_alpha = {cfg.loss_alpha!r}",
        f"train.checkpoint_every = {cfg.checkpoint_every}",
    ]
    return "\n".join(lines) + "\n"


def default_config_text(fusion_mode: str = "B") -> str:
    """A ready-to-run desk-scale configuration."""
    from .network import desk_spec

    return spec_to_config_text(desk_spec(fusion_mode)) + train_to_config_text(TrainConfig())
