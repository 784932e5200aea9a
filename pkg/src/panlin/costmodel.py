"""Closed-form FLOP / activation / parameter accounting.

The counting convention is pinned explicitly because FLOP figures are
meaningless without one:

  * A contraction costs 2 FLOPs per multiply-accumulate.
  * Softmax over the last axis costs 2 FLOPs per element (one exponentiation
    plus one normalizing division; the max subtraction and the reduction sum
    are not billed).
  * Scaling by a scalar costs 1 FLOP per element.
  * Convolutions are billed at 1 FLOP per multiply-accumulate by default
    (the usual convention in segmentation-model FLOP tables); a 2-per-MAC
    mode is available and clearly labeled.
  * Normalization, activations, bias adds, elementwise sums, and bilinear
    resampling are not billed by default. Toggles exist to bill them, for
    anyone who wants exhaustive accounting rather than comparability.

Space is counted as materialized intermediate scalars: contraction outputs
count, in-place normalizations and scalings do not.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

from .branches import BranchConfig, StagePlan, build_plan
from .errors import ConfigError

GENERATOR_ORDER = ("QG", "KG", "VG", "ASG", "RG")


@dataclass(frozen=True)
class CountingConvention:
    softmax_exp_flops: int = 1
    softmax_normalize_flops: int = 1
    scale_flops: int = 1
    contract_flops_per_mac: int = 2
    conv_flops_per_mac: int = 1
    count_bias: bool = False
    count_normalization: bool = False
    norm_flops_per_element: int = 8
    count_activation: bool = False
    count_elementwise: bool = False
    count_upsample: bool = False
    upsample_flops_per_element: int = 7

    def to_json_dict(self) -> dict:
        return asdict(self)

    def with_overrides(self, **kw) -> "CountingConvention":
        bad = set(kw) - set(asdict(self))
        if bad:
            raise ConfigError(f"unknown convention fields {sorted(bad)}")
        return replace(self, **kw)


DEFAULT_CONVENTION = CountingConvention()


@dataclass(frozen=True)
class StageCost:
    name: str
    flops: int
    scalars: int
    params: int


@dataclass(frozen=True)
class CostReport:
    flops: int
    peak_scalars: int
    params: int
    stages: tuple[StageCost, ...]
    convention: CountingConvention
    variant: str = ""
    image: tuple[int, int] | None = None
    dims: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.flops != sum(s.flops for s in self.stages):
            raise ConfigError("stage flops do not sum to the total")
        if self.params != sum(s.params for s in self.stages):
            raise ConfigError("stage params do not sum to the total")
        if self.peak_scalars != sum(s.scalars for s in self.stages):
            raise ConfigError("stage scalars do not sum to the total")

    def stage(self, name: str) -> StageCost:
        for s in self.stages:
            if s.name == name:
                return s
        raise KeyError(name)

    def to_json_dict(self) -> dict:
        out = {
            "variant": self.variant,
            "image": list(self.image) if self.image else None,
            "convention": self.convention.to_json_dict(),
            "totals": {
                "flops": self.flops,
                "params": self.params,
                "peak_scalars": self.peak_scalars,
            },
            "stages": [
                {"name": s.name, "flops": s.flops, "scalars": s.scalars, "params": s.params}
                for s in self.stages
            ],
        }
        if self.dims:
            out["dims"] = dict(self.dims)
        return out


def _report(stages, convention, **meta) -> CostReport:
    return CostReport(
        flops=sum(s.flops for s in stages),
        peak_scalars=sum(s.scalars for s in stages),
        params=sum(s.params for s in stages),
        stages=tuple(stages),
        convention=convention,
        **meta,
    )


def generator_closed_forms(n: int, h: int, w: int, c: int, p: int) -> dict[str, dict[str, int]]:
    """Per-generator time/space/model counts for the linear attention module.

    These are the module's published closed forms and are intentionally
    written as fixed integer expressions, independent of CountingConvention;
    the instrumented executor must reproduce them under the default
    convention (see verify_closed_forms).
    """
    hw = h * w
    return {
        "QG": {"flops": 2 * n * hw * c * c, "scalars": n * hw * c, "params": c * c},
        "KG": {
            "flops": 4 * n * hw * c * p + 2 * n * hw * p,
            "scalars": n * hw * p + n * p * c,
            "params": c * p,
        },
        "VG": {"flops": 2 * n * p * c * c, "scalars": n * p * c, "params": c * c},
        "ASG": {
            "flops": 2 * n * hw * p * c + 3 * n * hw * p,
            "scalars": n * hw * p,
            "params": 0,
        },
        "RG": {"flops": 2 * n * hw * p * c, "scalars": n * hw * c, "params": 0},
    }


def lintention_closed_form_totals(n: int, h: int, w: int, c: int, p: int) -> dict[str, int]:
    hw = h * w
    return {
        "flops": n * hw * (2 * c * c + 8 * p * c + 5 * p) + 2 * n * p * c * c,
        "scalars": 2 * n * hw * p + 2 * n * hw * c + 2 * n * p * c,
        "params": 2 * c * c + c * p,
    }


def lintention_cost(
    n: int, h: int, w: int, c: int, p: int, convention: CountingConvention = DEFAULT_CONVENTION
) -> CostReport:
    """Cost of one linear-attention module application, itemized per generator."""
    if min(n, h, w, c, p) < 1:
        raise ConfigError("all dims must be >= 1")
    forms = generator_closed_forms(n, h, w, c, p)
    stages = [
        StageCost(name=g, flops=forms[g]["flops"], scalars=forms[g]["scalars"], params=forms[g]["params"])
        for g in GENERATOR_ORDER
    ]
    report = _report(
        stages, convention, variant="lintention-module",
        dims={"n": n, "h": h, "w": w, "c": c, "p": p},
    )
    totals = lintention_closed_form_totals(n, h, w, c, p)
    assert report.flops == totals["flops"] and report.peak_scalars == totals["scalars"]
    assert report.params == totals["params"]
    return report


def self_attention_closed_form_flops(n: int, hw: int, c: int) -> int:
    """Quadratic reference under the same convention: three projections, the
    all-pairs score matrix (scaled, softmaxed), and the value mix."""
    return 6 * n * hw * c * c + 4 * n * hw * hw * c + 3 * n * hw * hw


def _se_params(c: int, r: int) -> int:
    mid = c // r
    return c * mid + mid + mid * c + c


def _se_flops(c: int, r: int, hw: int, n: int, conv: CountingConvention) -> int:
    mid = c // r
    flops = conv.conv_flops_per_mac * n * (c * mid + mid * c)
    if conv.count_bias:
        flops += n * (mid + c)
    if conv.count_elementwise:
        flops += n * hw * c + n * hw * c  # pool adds + channel scaling
    if conv.count_activation:
        flops += n * (mid + c)  # relu + sigmoid
    return flops


def stage_cost(st: StagePlan, convention: CountingConvention, batch: int = 1) -> StageCost:
    conv = convention
    px = st.out_hw[0] * st.out_hw[1]
    n = batch
    if st.kind == "conv":
        macs = n * px * st.out_channels * (st.in_channels // st.conv_groups) * st.kernel * st.kernel
        flops = conv.conv_flops_per_mac * macs
        params = st.out_channels * (st.in_channels // st.conv_groups) * st.kernel * st.kernel
        if st.bias:
            params += st.out_channels
            if conv.count_bias:
                flops += n * px * st.out_channels
        return StageCost(st.name, flops, n * px * st.out_channels, params)
    if st.kind == "pyconv":
        flops = 0
        params = 0
        for k, g, share in st.pyconv_levels:
            flops += conv.conv_flops_per_mac * n * px * share * (st.in_channels // g) * k * k
            params += share * (st.in_channels // g) * k * k
            if st.se_per_level:
                flops += _se_flops(share, st.se_reduction, px, n, conv)
                params += _se_params(share, st.se_reduction)
        return StageCost(st.name, flops, n * px * st.out_channels, params)
    if st.kind == "se":
        return StageCost(
            st.name,
            _se_flops(st.in_channels, st.se_reduction, px, n, conv),
            0,
            _se_params(st.in_channels, st.se_reduction),
        )
    if st.kind == "groupnorm":
        flops = conv.norm_flops_per_element * n * px * st.out_channels if conv.count_normalization else 0
        return StageCost(st.name, flops, 0, 2 * st.out_channels)
    if st.kind == "relu":
        flops = n * px * st.out_channels if conv.count_activation else 0
        return StageCost(st.name, flops, 0, 0)
    if st.kind == "upsample2x":
        flops = conv.upsample_flops_per_element * n * px * st.out_channels if conv.count_upsample else 0
        return StageCost(st.name, flops, n * px * st.out_channels, 0)
    if st.kind == "attention":
        h, w = st.in_hw
        c, p = st.in_channels, st.attn_groups
        totals = lintention_closed_form_totals(n, h, w, c, p)
        flops = totals["flops"]
        if conv.count_elementwise:
            flops += n * px * c  # skip connection
        if conv.count_normalization:
            flops += conv.norm_flops_per_element * n * px * c
        return StageCost(
            st.name, flops, totals["scalars"] + n * px * c, totals["params"] + 2 * c
        )
    if st.kind == "merge_sum":
        flops = 3 * n * px * st.out_channels if conv.count_elementwise else 0
        return StageCost(st.name, flops, n * px * st.out_channels, 0)
    raise ConfigError(f"no cost rule for stage kind '{st.kind}'")


def branch_cost(cfg: BranchConfig, convention: CountingConvention = DEFAULT_CONVENTION) -> CostReport:
    """Fold the convention over the exact stage graph of the branch."""
    stages = [stage_cost(st, convention) for st in build_plan(cfg)]
    return _report(
        stages, convention, variant=cfg.variant, image=(cfg.image_h, cfg.image_w)
    )


def compare_branches(
    cfg: BranchConfig, convention: CountingConvention = DEFAULT_CONVENTION
) -> dict:
    """Reports for all five variants plus percentage deltas against baseline.

    The pyramid-conv rows depend on a pyramid configuration that published
    comparison tables leave unstated, so those deltas are approximate by
    nature; the baseline and attention rows follow the documented topology.
    """
    from .branches import VARIANTS

    reports = {}
    for variant in VARIANTS:
        reports[variant] = branch_cost(replace(cfg, variant=variant), convention)
    base = reports["baseline"]
    deltas = {
        v: {
            "flops_pct": 100.0 * (r.flops - base.flops) / base.flops,
            "params_pct": 100.0 * (r.params - base.params) / base.params,
        }
        for v, r in reports.items()
    }
    return {"reports": reports, "deltas": deltas}


@dataclass(frozen=True)
class ClosedFormFailure:
    generator: str
    dims: dict[str, int]
    quantity: str  # "flops" | "scalars" | "params"
    expected: int
    measured: int

    def describe(self) -> str:
        return (
            f"{self.generator} {self.quantity} mismatch at {self.dims}: "
            f"closed form {self.expected}, instrumented {self.measured}"
        )


@dataclass(frozen=True)
class VerifyReport:
    cases: int
    passed: int
    failures: tuple[ClosedFormFailure, ...]

    @property
    def ok(self) -> bool:
        return self.passed == self.cases and not self.failures


def verify_closed_forms(
    max_extent: int,
    convention: CountingConvention = DEFAULT_CONVENTION,
    seed: int = 7,
    max_failures: int = 5,
) -> VerifyReport:
    """Run the instrumented executor over every dim combination with extents
    up to max_extent and require exact integer agreement with the closed
    forms, per generator and in total."""
    from itertools import product

    from . import verification
    from .lintention import init_params
    from .rng import SplitMix64
    from .tensor import Tensor

    if max_extent < 1:
        raise ConfigError("max_extent must be >= 1")
    cases = 0
    passed = 0
    failures: list[ClosedFormFailure] = []
    stream = SplitMix64(seed)
    for n, h, w, c, p in product(range(1, max_extent + 1), repeat=5):
        cases += 1
        params = init_params(stream.next_u64(), c, p)
        x = Tensor(("n", "h", "w", "c"), stream.fill((n, h, w, c), -1.0, 1.0))
        run = verification.counted_run(
            verification.lintention_program(params), {"x": x}, convention
        )
        measured = run.stage_totals()
        forms = generator_closed_forms(n, h, w, c, p)
        actual_params = {
            "QG": params.wq.numel,
            "KG": params.wk.numel,
            "VG": params.wv.numel,
            "ASG": 0,
            "RG": 0,
        }
        dims = {"n": n, "h": h, "w": w, "c": c, "p": p}
        case_failures = []
        for g in GENERATOR_ORDER:
            for qty, got in (
                ("flops", measured[g]["flops"]),
                ("scalars", measured[g]["scalars"]),
                ("params", actual_params[g]),
            ):
                if got != forms[g][qty]:
                    case_failures.append(
                        ClosedFormFailure(g, dims, qty, forms[g][qty], got)
                    )
        totals = lintention_closed_form_totals(n, h, w, c, p)
        if run.flops != totals["flops"]:
            case_failures.append(
                ClosedFormFailure("total", dims, "flops", totals["flops"], run.flops)
            )
        if run.peak_scalars != totals["scalars"]:
            case_failures.append(
                ClosedFormFailure("total", dims, "scalars", totals["scalars"], run.peak_scalars)
            )
        if case_failures:
            failures.extend(case_failures[: max(0, max_failures - len(failures))])
        else:
            passed += 1
    return VerifyReport(cases=cases, passed=passed, failures=tuple(failures))
