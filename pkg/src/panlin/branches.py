"""Semantic-branch variants over feature-pyramid inputs.

Every variant turns four pyramid levels (1/4 .. 1/32 scale, 256 channels)
into per-pixel class logits at image resolution. A branch is described by a
stage plan; the same plan drives weight construction, the forward pass, and
the cost model, so the three can never disagree about topology.

Variants:
  baseline    per level: repeated (3x3 conv -> group norm -> ReLU -> 2x
              upsample) until 1/4 scale; the 1/4 level gets one conv stage
              without upsampling.
  pyconv      the 3x3 conv replaced by a pyramid of grouped convolutions
              with mixed kernel sizes, outputs concatenated.
  verconv     pyconv followed by squeeze-excite gating on the concatenated
              output.
  verconvsep  squeeze-excite applied to each pyramid level separately.
  lintention  the 1/32 path replaced by a 1x1 channel reduction and three
              (attention layer + 2x upsample) stages; other levels as
              baseline.

All variants end with an elementwise sum of the four 1/4-scale maps, a 1x1
classifier conv (with bias), and 4x bilinear upsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DimensionError
from .lintention import LintentionLayerParams, LintentionParams
from .rng import SplitMix64
from .tensor import ConvKernel, Tensor, add, bilinear_upsample2x, conv2d, relu, sigmoid

FPN_CHANNELS = 256
FPN_SCALES = (("p2", 4), ("p3", 8), ("p4", 16), ("p5", 32))
VARIANTS = ("baseline", "pyconv", "verconv", "verconvsep", "lintention")


@dataclass(frozen=True)
class PyConvConfig:
    """Pyramid levels as (kernel, group count, output channel share)."""

    levels: tuple[tuple[int, int, int], ...]

    @classmethod
    def default_for(cls, out_channels: int) -> "PyConvConfig":
        """Four levels, kernels 3/5/7/9, groups 1/4/8/16, equal shares."""
        if out_channels % 4 != 0:
            raise ConfigError(f"default pyramid needs channels % 4 == 0, got {out_channels}")
        share = out_channels // 4
        return cls(((3, 1, share), (5, 4, share), (7, 8, share), (9, 16, share)))

    def validate(self, out_channels: int):
        if sum(s for _, _, s in self.levels) != out_channels:
            raise ConfigError(
                f"pyramid shares {[s for _, _, s in self.levels]} do not sum to {out_channels}"
            )
        for k, g, s in self.levels:
            if k % 2 == 0:
                raise ConfigError(f"pyramid kernel {k} must be odd")
            if s % g != 0:
                raise ConfigError(f"share {s} not divisible by groups {g}")

    def validate_input(self, in_channels: int):
        for _, g, _ in self.levels:
            if in_channels % g != 0:
                raise ConfigError(f"{in_channels} input channels not divisible by groups {g}")


@dataclass(frozen=True)
class BranchConfig:
    variant: str
    image_h: int
    image_w: int
    num_classes: int = 54
    stage_channels: int = 128
    attn_groups: int = 16
    se_reduction: int = 16
    gn_groups: int = 32
    pyconv: PyConvConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'")
        if self.image_h % 32 != 0 or self.image_w % 32 != 0:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} must be divisible by 32"
            )
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.stage_channels % self.gn_groups != 0:
            raise ConfigError(
                f"stage channels {self.stage_channels} not divisible by "
                f"{self.gn_groups} norm groups"
            )
        if self.variant in ("pyconv", "verconv", "verconvsep"):
            py = self.pyconv or PyConvConfig.default_for(self.stage_channels)
            py.validate(self.stage_channels)
            py.validate_input(FPN_CHANNELS)
            py.validate_input(self.stage_channels)
            object.__setattr__(self, "pyconv", py)
        if self.variant == "verconv" and self.stage_channels % self.se_reduction != 0:
            raise ConfigError("stage channels not divisible by the SE reduction")
        if self.variant == "verconvsep":
            for _, _, s in (self.pyconv or PyConvConfig.default_for(self.stage_channels)).levels:
                if s % self.se_reduction != 0:
                    raise ConfigError(
                        f"pyramid share {s} not divisible by SE reduction {self.se_reduction}"
                    )


@dataclass(frozen=True)
class StagePlan:
    """One node of the stage graph; geometry is fully resolved."""

    name: str
    kind: str  # conv | pyconv | se | groupnorm | relu | upsample2x | attention | merge_sum
    level: str
    in_channels: int
    out_channels: int
    in_hw: tuple[int, int]
    out_hw: tuple[int, int]
    kernel: int = 0
    conv_groups: int = 1
    bias: bool = False
    pyconv_levels: tuple[tuple[int, int, int], ...] = ()
    se_per_level: bool = False
    se_reduction: int = 0
    attn_groups: int = 0
    gn_groups: int = 0


def _level_stage_count(scale: int) -> int:
    return max(1, int(math.log2(scale)) - 2)


def build_plan(cfg: BranchConfig) -> tuple[StagePlan, ...]:
    h, w = cfg.image_h, cfg.image_w
    ch = cfg.stage_channels
    plan: list[StagePlan] = []

    for level, s in FPN_SCALES:
        hw = (h // s, w // s)
        if cfg.variant == "lintention" and level == "p5":
            plan.append(
                StagePlan(
                    name="p5.reduce", kind="conv", level=level,
                    in_channels=FPN_CHANNELS, out_channels=ch,
                    in_hw=hw, out_hw=hw, kernel=1,
                )
            )
            for i in range(3):
                plan.append(
                    StagePlan(
                        name=f"p5.attn{i + 1}", kind="attention", level=level,
                        in_channels=ch, out_channels=ch, in_hw=hw, out_hw=hw,
                        attn_groups=cfg.attn_groups,
                    )
                )
                up = (hw[0] * 2, hw[1] * 2)
                plan.append(
                    StagePlan(
                        name=f"p5.up{i + 1}", kind="upsample2x", level=level,
                        in_channels=ch, out_channels=ch, in_hw=hw, out_hw=up,
                    )
                )
                hw = up
            continue

        n_stages = _level_stage_count(s)
        for i in range(n_stages):
            cin = FPN_CHANNELS if i == 0 else ch
            if cfg.variant == "baseline" or cfg.variant == "lintention":
                plan.append(
                    StagePlan(
                        name=f"{level}.conv{i + 1}", kind="conv", level=level,
                        in_channels=cin, out_channels=ch, in_hw=hw, out_hw=hw,
                        kernel=3,
                    )
                )
            else:
                plan.append(
                    StagePlan(
                        name=f"{level}.pyconv{i + 1}", kind="pyconv", level=level,
                        in_channels=cin, out_channels=ch, in_hw=hw, out_hw=hw,
                        pyconv_levels=cfg.pyconv.levels,
                        se_per_level=cfg.variant == "verconvsep",
                        se_reduction=cfg.se_reduction if cfg.variant == "verconvsep" else 0,
                    )
                )
                if cfg.variant == "verconv":
                    plan.append(
                        StagePlan(
                            name=f"{level}.se{i + 1}", kind="se", level=level,
                            in_channels=ch, out_channels=ch, in_hw=hw, out_hw=hw,
                            se_reduction=cfg.se_reduction,
                        )
                    )
            plan.append(
                StagePlan(
                    name=f"{level}.gn{i + 1}", kind="groupnorm", level=level,
                    in_channels=ch, out_channels=ch, in_hw=hw, out_hw=hw,
                    gn_groups=cfg.gn_groups,
                )
            )
            plan.append(
                StagePlan(
                    name=f"{level}.relu{i + 1}", kind="relu", level=level,
                    in_channels=ch, out_channels=ch, in_hw=hw, out_hw=hw,
                )
            )
            if s > 4:
                up = (hw[0] * 2, hw[1] * 2)
                plan.append(
                    StagePlan(
                        name=f"{level}.up{i + 1}", kind="upsample2x", level=level,
                        in_channels=ch, out_channels=ch, in_hw=hw, out_hw=up,
                    )
                )
                hw = up
                s //= 2

    quarter = (h // 4, w // 4)
    plan.append(
        StagePlan(
            name="merge.sum", kind="merge_sum", level="merge",
            in_channels=ch, out_channels=ch, in_hw=quarter, out_hw=quarter,
        )
    )
    plan.append(
        StagePlan(
            name="merge.classifier", kind="conv", level="merge",
            in_channels=ch, out_channels=cfg.num_classes,
            in_hw=quarter, out_hw=quarter, kernel=1, bias=True,
        )
    )
    hw = quarter
    for i in range(2):
        up = (hw[0] * 2, hw[1] * 2)
        plan.append(
            StagePlan(
                name=f"merge.up{i + 1}", kind="upsample2x", level="merge",
                in_channels=cfg.num_classes, out_channels=cfg.num_classes,
                in_hw=hw, out_hw=up,
            )
        )
        hw = up
    return tuple(plan)


@dataclass(frozen=True)
class GroupNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    groups: int
    eps: float = 1e-5


@dataclass(frozen=True)
class SeParams:
    w_reduce: np.ndarray  # (c, c//r)
    b_reduce: np.ndarray
    w_expand: np.ndarray  # (c//r, c)
    b_expand: np.ndarray


@dataclass(frozen=True)
class PyConvWeights:
    kernels: tuple[ConvKernel, ...]
    se: tuple[SeParams, ...] = ()


@dataclass(frozen=True)
class BranchWeights:
    config: BranchConfig
    plan: tuple[StagePlan, ...]
    params: dict[str, object] = field(repr=False)


def _draw_conv(stream: SplitMix64, out_ch: int, in_ch: int, groups: int, k: int, bias: bool) -> ConvKernel:
    fan_in = (in_ch // groups) * k * k
    bound = 1.0 / math.sqrt(fan_in)
    w = Tensor(("o", "i", "kh", "kw"), stream.fill((out_ch, in_ch // groups, k, k), -bound, bound))
    return ConvKernel(weights=w, groups=groups, bias=np.zeros(out_ch) if bias else None)


def _draw_se(stream: SplitMix64, c: int, r: int) -> SeParams:
    mid = c // r
    return SeParams(
        w_reduce=stream.fill((c, mid), -1.0 / math.sqrt(c), 1.0 / math.sqrt(c)),
        b_reduce=np.zeros(mid),
        w_expand=stream.fill((mid, c), -1.0 / math.sqrt(mid), 1.0 / math.sqrt(mid)),
        b_expand=np.zeros(c),
    )


def _draw_attention(stream: SplitMix64, c: int, p: int) -> LintentionLayerParams:
    bound = 1.0 / math.sqrt(c)
    core = LintentionParams(
        wq=Tensor(("c", "d"), stream.fill((c, c), -bound, bound)),
        wk=Tensor(("c", "p"), stream.fill((c, p), -bound, bound)),
        wv=Tensor(("c", "d"), stream.fill((c, c), -bound, bound)),
    )
    return LintentionLayerParams(core=core, gamma=np.ones(c), beta=np.zeros(c))


def build_branch(cfg: BranchConfig) -> BranchWeights:
    """Instantiate seeded weights for every stage in plan order."""
    plan = build_plan(cfg)
    stream = SplitMix64(cfg.seed)
    params: dict[str, object] = {}
    for st in plan:
        if st.kind == "conv":
            params[st.name] = _draw_conv(
                stream, st.out_channels, st.in_channels, st.conv_groups, st.kernel, st.bias
            )
        elif st.kind == "pyconv":
            kernels = []
            ses = []
            for k, g, share in st.pyconv_levels:
                kernels.append(_draw_conv(stream, share, st.in_channels, g, k, bias=False))
                if st.se_per_level:
                    ses.append(_draw_se(stream, share, st.se_reduction))
            params[st.name] = PyConvWeights(kernels=tuple(kernels), se=tuple(ses))
        elif st.kind == "se":
            params[st.name] = _draw_se(stream, st.in_channels, st.se_reduction)
        elif st.kind == "groupnorm":
            params[st.name] = GroupNormParams(
                gamma=np.ones(st.in_channels), beta=np.zeros(st.in_channels), groups=st.gn_groups
            )
        elif st.kind == "attention":
            params[st.name] = _draw_attention(stream, st.in_channels, st.attn_groups)
    return BranchWeights(config=cfg, plan=plan, params=params)


@dataclass(frozen=True)
class FpnFeatures:
    p2: Tensor
    p3: Tensor
    p4: Tensor
    p5: Tensor

    def __post_init__(self):
        prev = None
        for name in ("p2", "p3", "p4", "p5"):
            t = getattr(self, name)
            if t.axes != ("n", "h", "w", "c"):
                raise DimensionError(f"{name} needs axes (n,h,w,c), got {t.axes}")
            if t.extent("c") != FPN_CHANNELS:
                raise DimensionError(
                    f"{name} has {t.extent('c')} channels, expected {FPN_CHANNELS}"
                )
            if prev is not None:
                if prev.extent("h") != 2 * t.extent("h") or prev.extent("w") != 2 * t.extent("w"):
                    raise DimensionError(f"{name} extents must halve the previous level")
            prev = t

    def level(self, name: str) -> Tensor:
        return getattr(self, name)


def group_norm(t: Tensor, p: GroupNormParams) -> Tensor:
    n, h, w, c = t.data.shape
    if c % p.groups != 0:
        raise ConfigError(f"{c} channels not divisible by {p.groups} norm groups")
    g = p.groups
    x = t.data.reshape(n, h, w, g, c // g)
    mu = x.mean(axis=(1, 2, 4), keepdims=True)
    var = x.var(axis=(1, 2, 4), keepdims=True)
    xhat = ((x - mu) / np.sqrt(var + p.eps)).reshape(n, h, w, c)
    return Tensor(t.axes, xhat * p.gamma + p.beta)


def se_gate(t: Tensor, se: SeParams) -> Tensor:
    """Channel gating: global average pool -> bottleneck MLP -> sigmoid scale."""
    c = t.data.shape[-1]
    if se.w_reduce.shape[0] != c:
        raise ConfigError(f"SE weights expect {se.w_reduce.shape[0]} channels, input has {c}")
    z = t.data.mean(axis=(1, 2))
    hidden = np.maximum(z @ se.w_reduce + se.b_reduce, 0.0)
    gates = sigmoid(Tensor(("n", "c"), hidden @ se.w_expand + se.b_expand)).data
    return Tensor(t.axes, t.data * gates[:, None, None, :])


def pyconv_forward(t: Tensor, w: PyConvWeights) -> Tensor:
    """Independent grouped convs, channel-concatenated (per-level SE optional)."""
    parts = []
    for i, k in enumerate(w.kernels):
        out = conv2d(t, k)
        if w.se:
            out = se_gate(out, w.se[i])
        parts.append(out.data)
    return Tensor(("n", "h", "w", "c"), np.concatenate(parts, axis=-1))


def verconv_forward(t: Tensor, w: PyConvWeights, se: SeParams | None, mode: str) -> Tensor:
    """mode='collective': SE over the concatenated pyramid output.
    mode='separate': SE per pyramid level before concatenation."""
    if mode == "collective":
        if se is None:
            raise ConfigError("collective mode needs a shared SE parameter set")
        return se_gate(pyconv_forward(t, PyConvWeights(kernels=w.kernels)), se)
    if mode == "separate":
        if len(w.se) != len(w.kernels):
            raise ConfigError("separate mode needs one SE parameter set per level")
        return pyconv_forward(t, w)
    raise ConfigError(f"unknown VerConv mode '{mode}'")


def _run_stage(st: StagePlan, x: Tensor, params: dict[str, object]) -> Tensor:
    from .lintention import lintention_layer_forward

    if st.kind == "conv":
        return conv2d(x, params[st.name])
    if st.kind == "pyconv":
        return pyconv_forward(x, params[st.name])
    if st.kind == "se":
        return se_gate(x, params[st.name])
    if st.kind == "groupnorm":
        return group_norm(x, params[st.name])
    if st.kind == "relu":
        return relu(x)
    if st.kind == "upsample2x":
        return bilinear_upsample2x(x)
    if st.kind == "attention":
        return lintention_layer_forward(x, params[st.name])
    raise ConfigError(f"stage kind '{st.kind}' cannot be executed directly")


def branch_forward(features: FpnFeatures, weights: BranchWeights) -> Tensor:
    """Per-pixel class logits at image resolution, axes (c, h, w)."""
    outs: dict[str, Tensor] = {}
    by_level: dict[str, list[StagePlan]] = {}
    merge: list[StagePlan] = []
    for st in weights.plan:
        (merge if st.level == "merge" else by_level.setdefault(st.level, [])).append(st)

    for level, stages in by_level.items():
        x = features.level(level)
        first = stages[0]
        if (x.extent("h"), x.extent("w")) != first.in_hw or x.extent("c") != first.in_channels:
            raise DimensionError(
                f"{level} features {x.shape} do not match plan entry {first.in_hw} "
                f"x {first.in_channels}ch"
            )
        for st in stages:
            x = _run_stage(st, x, weights.params)
        outs[level] = x

    acc = outs["p2"]
    for level in ("p3", "p4", "p5"):
        acc = add(acc, outs[level])
    x = acc
    for st in merge:
        if st.kind == "merge_sum":
            continue  # folded above
        x = _run_stage(st, x, weights.params)
    return Tensor(("c", "h", "w"), np.ascontiguousarray(x.data[0].transpose(2, 0, 1)))


def synthetic_features(image_h: int, image_w: int, seed: int, batch: int = 1) -> FpnFeatures:
    """Noise features standing in for a backbone; uniform(-1, 1), levels drawn p2..p5."""
    if image_h % 32 != 0 or image_w % 32 != 0:
        raise ConfigError(f"image {image_h}x{image_w} must be divisible by 32")
    stream = SplitMix64(seed)
    levels = {}
    for name, s in FPN_SCALES:
        levels[name] = Tensor(
            ("n", "h", "w", "c"),
            stream.fill((batch, image_h // s, image_w // s, FPN_CHANNELS), -1.0, 1.0),
        )
    return FpnFeatures(**levels)


def _avg_pool2x(arr: np.ndarray) -> np.ndarray:
    n, h, w, c = arr.shape
    return arr.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def features_from_image(img: Tensor, seed: int) -> FpnFeatures:
    """Deterministic stand-in backbone: average-pool pyramid plus a seeded
    channel projection to the pyramid width."""
    if img.axes != ("n", "h", "w", "c"):
        raise DimensionError(f"image tensor needs axes (n,h,w,c), got {img.axes}")
    h, w = img.extent("h"), img.extent("w")
    if h % 32 != 0 or w % 32 != 0:
        raise ConfigError(f"image {h}x{w} must be divisible by 32")
    c = img.extent("c")
    stream = SplitMix64(seed)
    bound = 1.0 / math.sqrt(c)
    pooled = img.data
    levels = {}
    for i, (name, _) in enumerate(FPN_SCALES):
        for _ in range(2 if i == 0 else 1):
            pooled = _avg_pool2x(pooled)
        proj = stream.fill((c, FPN_CHANNELS), -bound, bound)
        levels[name] = Tensor(("n", "h", "w", "c"), pooled @ proj)
    return FpnFeatures(**levels)
