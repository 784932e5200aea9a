"""Independent oracles and instrumentation.

Everything here exists to check the fast paths from the outside:

  * loop oracles: scalar re-implementations of every operator over nested
    Python lists, sharing no arithmetic code with the tensor engine;
  * a literal step-counting reference for the attention module that tallies
    FLOPs and materialized scalars inside its own loops;
  * counted_run: executes an operator program while billing each step under
    a CountingConvention, with output bit-identical to uncounted execution;
  * a quadratic standard self-attention reference used as a complexity foil;
  * central-difference gradient checking;
  * a brute-force all-pairs panoptic-quality matcher.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from typing import Callable

import numpy as np

from .costmodel import CountingConvention, DEFAULT_CONVENTION
from .errors import NumericError, UsageError
from .lintention import (
    AGGREGATE_SPEC,
    CLASSIFY_SPEC,
    QUERY_SPEC,
    RESULT_SPEC,
    SCORE_SPEC,
    VALUE_SPEC,
    LintentionParams,
)
from .metrics import PanopticMap
from .tensor import (
    EinsumSpec,
    Tensor,
    add,
    contract,
    contract_macs,
    layer_norm,
    scale,
    softmax_lastdim,
)

# ---------------------------------------------------------------------------
# Nested-list helpers for the loop oracles.


def _zeros(shape):
    if len(shape) == 1:
        return [0.0] * shape[0]
    return [_zeros(shape[1:]) for _ in range(shape[0])]


def _shape_of(nested):
    shape = []
    node = nested
    while isinstance(node, list):
        shape.append(len(node))
        node = node[0]
    return tuple(shape)


def _get(nested, idx):
    node = nested
    for i in idx:
        node = node[i]
    return node


def _set(nested, idx, value):
    node = nested
    for i in idx[:-1]:
        node = node[i]
    node[idx[-1]] = value


def loop_contract(spec: EinsumSpec, a, b):
    """Sum-of-products with explicit nested loops, ascending-index order."""
    extents = {}
    for axes, nested in ((spec.lhs, a), (spec.rhs, b)):
        for name, e in zip(axes, _shape_of(nested)):
            extents[name] = e
    contracted = spec.contracted_axes()
    out = _zeros(tuple(extents[x] for x in spec.out))
    for out_idx in product(*(range(extents[x]) for x in spec.out)):
        env = dict(zip(spec.out, out_idx))
        total = 0.0
        for c_idx in product(*(range(extents[x]) for x in contracted)):
            env.update(zip(contracted, c_idx))
            total += _get(a, [env[x] for x in spec.lhs]) * _get(b, [env[x] for x in spec.rhs])
        _set(out, out_idx, total)
    return out


def _softmax_row(row):
    m = max(row)
    exps = [math.exp(v - m) for v in row]
    s = sum(exps)
    return [e / s for e in exps]


def _map_rows(nested, fn, depth):
    if depth == 0:
        return fn(nested)
    return [_map_rows(sub, fn, depth - 1) for sub in nested]


def loop_softmax_lastdim(nested):
    return _map_rows(nested, _softmax_row, len(_shape_of(nested)) - 1)


def loop_layer_norm(nested, gamma, beta, eps):
    def norm(row):
        n = len(row)
        mu = sum(row) / n
        var = sum((v - mu) ** 2 for v in row) / n
        inv = 1.0 / math.sqrt(var + eps)
        return [(v - mu) * inv * gamma[i] + beta[i] for i, v in enumerate(row)]

    return _map_rows(nested, norm, len(_shape_of(nested)) - 1)


def loop_relu(nested):
    return _map_rows(nested, lambda v: max(v, 0.0), len(_shape_of(nested)))


def loop_conv2d(x, w, groups=1, bias=None):
    """Same-padded grouped cross-correlation; x is (n,h,w,c), w is (o,i,kh,kw)."""
    n, h, wd, c = _shape_of(x)
    o, ipg, kh, kw = _shape_of(w)
    ph, pw = kh // 2, kw // 2
    opg = o // groups
    out = _zeros((n, h, wd, o))
    for ni in range(n):
        for i in range(h):
            for j in range(wd):
                for oc in range(o):
                    g = oc // opg
                    acc = 0.0 if bias is None else bias[oc]
                    for di in range(kh):
                        ii = i + di - ph
                        if ii < 0 or ii >= h:
                            continue
                        for dj in range(kw):
                            jj = j + dj - pw
                            if jj < 0 or jj >= wd:
                                continue
                            row = x[ni][ii][jj]
                            wrow = w[oc]
                            for ci in range(ipg):
                                acc += row[g * ipg + ci] * wrow[ci][di][dj]
                    out[ni][i][j][oc] = acc
    return out


def loop_group_norm(x, gamma, beta, groups, eps=1e-5):
    n, h, w, c = _shape_of(x)
    cpg = c // groups
    out = _zeros((n, h, w, c))
    for ni in range(n):
        for g in range(groups):
            vals = [
                x[ni][i][j][g * cpg + ci]
                for i in range(h)
                for j in range(w)
                for ci in range(cpg)
            ]
            mu = sum(vals) / len(vals)
            var = sum((v - mu) ** 2 for v in vals) / len(vals)
            inv = 1.0 / math.sqrt(var + eps)
            for i in range(h):
                for j in range(w):
                    for ci in range(cpg):
                        ch = g * cpg + ci
                        out[ni][i][j][ch] = (x[ni][i][j][ch] - mu) * inv * gamma[ch] + beta[ch]
    return out


def loop_se_gate(x, w_reduce, b_reduce, w_expand, b_expand):
    n, h, w, c = _shape_of(x)
    mid = len(b_reduce)
    out = _zeros((n, h, w, c))
    for ni in range(n):
        pooled = [
            sum(x[ni][i][j][ci] for i in range(h) for j in range(w)) / (h * w)
            for ci in range(c)
        ]
        hidden = [
            max(0.0, sum(pooled[ci] * w_reduce[ci][m] for ci in range(c)) + b_reduce[m])
            for m in range(mid)
        ]
        gates = []
        for ci in range(c):
            z = sum(hidden[m] * w_expand[m][ci] for m in range(mid)) + b_expand[ci]
            gates.append(1.0 / (1.0 + math.exp(-z)))
        for i in range(h):
            for j in range(w):
                for ci in range(c):
                    out[ni][i][j][ci] = x[ni][i][j][ci] * gates[ci]
    return out


def loop_pyconv(x, kernels, ses=None):
    """kernels: list of (weights, groups); ses: optional per-level SE tuples."""
    parts = []
    for idx, (w, groups) in enumerate(kernels):
        part = loop_conv2d(x, w, groups=groups)
        if ses:
            part = loop_se_gate(part, *ses[idx])
        parts.append(part)
    n, h, wd, _ = _shape_of(x)
    out = []
    for ni in range(n):
        plane = []
        for i in range(h):
            row = []
            for j in range(wd):
                pixel = []
                for part in parts:
                    pixel.extend(part[ni][i][j])
                row.append(pixel)
            plane.append(row)
        out.append(plane)
    return out


def _up_taps(idx, n):
    src = (idx + 0.5) / 2.0 - 0.5
    src = min(max(src, 0.0), n - 1.0)
    i0 = int(math.floor(src))
    i1 = min(i0 + 1, n - 1)
    return i0, i1, src - i0


def loop_upsample2x(x):
    """Direct 4-tap bilinear evaluation per output pixel (half-pixel centers,
    edge clamped); deliberately not the separable formulation."""
    n, h, w, c = _shape_of(x)
    out = _zeros((n, 2 * h, 2 * w, c))
    for ni in range(n):
        for i in range(2 * h):
            i0, i1, fy = _up_taps(i, h)
            for j in range(2 * w):
                j0, j1, fx = _up_taps(j, w)
                for ci in range(c):
                    v00 = x[ni][i0][j0][ci]
                    v01 = x[ni][i0][j1][ci]
                    v10 = x[ni][i1][j0][ci]
                    v11 = x[ni][i1][j1][ci]
                    top = v00 * (1 - fx) + v01 * fx
                    bot = v10 * (1 - fx) + v11 * fx
                    out[ni][i][j][ci] = top * (1 - fy) + bot * fy
    return out


# ---------------------------------------------------------------------------
# Literal counting reference for the attention module.


@dataclass
class _Tally:
    flops: int = 0
    scalars: int = 0


def lintention_loop_reference(
    x, wq, wk, wv, convention: CountingConvention = DEFAULT_CONVENTION
):
    """Re-derivation of the attention module with explicit loops.

    Counters are incremented inside the loops: contract_flops_per_mac per
    multiply-accumulate, the softmax constants per element, scale_flops per
    scaled element. Materialized scalars are the lengths of the allocated
    intermediates; softmax and scaling happen in place and allocate nothing.

    Returns (trace, tallies) where trace maps q/l/k/v/scores/y to nested
    lists and tallies maps generator names to _Tally records.
    """
    n, h, w, c = _shape_of(x)
    p = len(wk[0])
    cm = convention.contract_flops_per_mac
    sm = convention.softmax_exp_flops + convention.softmax_normalize_flops
    tallies = {g: _Tally() for g in ("QG", "KG", "VG", "ASG", "RG")}

    q = _zeros((n, h, w, c))
    t = tallies["QG"]
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                for d in range(c):
                    acc = 0.0
                    for ci in range(c):
                        acc += x[ni][i][j][ci] * wq[ci][d]
                        t.flops += cm
                    q[ni][i][j][d] = acc
    t.scalars += n * h * w * c

    t = tallies["KG"]
    l = _zeros((n, h, w, p))
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                for pi in range(p):
                    acc = 0.0
                    for ci in range(c):
                        acc += x[ni][i][j][ci] * wk[ci][pi]
                        t.flops += cm
                    l[ni][i][j][pi] = acc
    t.scalars += n * h * w * p
    for ni in range(n):  # softmax in place over the group axis
        for i in range(h):
            for j in range(w):
                row = l[ni][i][j]
                m = max(row)
                for pi in range(p):
                    row[pi] = math.exp(row[pi] - m)
                    t.flops += sm
                s = sum(row)
                for pi in range(p):
                    row[pi] /= s
    k = _zeros((n, p, c))
    for ni in range(n):
        for pi in range(p):
            for ci in range(c):
                acc = 0.0
                for i in range(h):
                    for j in range(w):
                        acc += l[ni][i][j][pi] * q[ni][i][j][ci]
                        t.flops += cm
                k[ni][pi][ci] = acc
    t.scalars += n * p * c

    t = tallies["VG"]
    v = _zeros((n, p, c))
    for ni in range(n):
        for pi in range(p):
            for d in range(c):
                acc = 0.0
                for ci in range(c):
                    acc += k[ni][pi][ci] * wv[ci][d]
                    t.flops += cm
                v[ni][pi][d] = acc
    t.scalars += n * p * c

    t = tallies["ASG"]
    scores = _zeros((n, h, w, p))
    inv_sqrt_c = 1.0 / math.sqrt(c)
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                for pi in range(p):
                    acc = 0.0
                    for ci in range(c):
                        acc += k[ni][pi][ci] * q[ni][i][j][ci]
                        t.flops += cm
                    scores[ni][i][j][pi] = acc
    t.scalars += n * h * w * p
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                row = scores[ni][i][j]
                for pi in range(p):
                    row[pi] *= inv_sqrt_c
                    t.flops += convention.scale_flops
                m = max(row)
                for pi in range(p):
                    row[pi] = math.exp(row[pi] - m)
                    t.flops += sm
                s = sum(row)
                for pi in range(p):
                    row[pi] /= s

    t = tallies["RG"]
    y = _zeros((n, h, w, c))
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                for ci in range(c):
                    acc = 0.0
                    for pi in range(p):
                        acc += scores[ni][i][j][pi] * v[ni][pi][ci]
                        t.flops += cm
                    y[ni][i][j][ci] = acc
    t.scalars += n * h * w * c

    trace = {"q": q, "l": l, "k": k, "v": v, "scores": scores, "y": y}
    return trace, tallies


def naive_lintention(x: Tensor, p: LintentionParams) -> Tensor:
    """Loop-oracle forward pass; shares no arithmetic with the tensor engine."""
    trace, _ = lintention_loop_reference(
        x.data.tolist(), p.wq.data.tolist(), p.wk.data.tolist(), p.wv.data.tolist()
    )
    return Tensor(("n", "h", "w", "c"), np.array(trace["y"], dtype=np.float64))


def loop_lintention_layer(x, wq, wk, wv, gamma, beta, eps):
    trace, _ = lintention_loop_reference(x, wq, wk, wv)
    n, h, w, c = _shape_of(x)
    z = [
        [
            [
                [x[ni][i][j][ci] + trace["y"][ni][i][j][ci] for ci in range(c)]
                for j in range(w)
            ]
            for i in range(h)
        ]
        for ni in range(n)
    ]
    return loop_layer_norm(z, gamma, beta, eps)


# ---------------------------------------------------------------------------
# Counted execution of operator programs.


@dataclass(frozen=True)
class Step:
    out: str
    op: str
    ins: tuple[str, ...]
    stage: str
    kw: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Program:
    steps: tuple[Step, ...]
    consts: dict[str, Tensor]
    output: str


@dataclass(frozen=True)
class OpRecord:
    name: str
    stage: str
    op: str
    flops: int
    scalars: int


@dataclass(frozen=True)
class CountedExecution:
    output: Tensor
    flops: int
    peak_scalars: int
    log: tuple[OpRecord, ...]

    def stage_totals(self) -> dict[str, dict[str, int]]:
        totals: dict[str, dict[str, int]] = {}
        for rec in self.log:
            agg = totals.setdefault(rec.stage, {"flops": 0, "scalars": 0})
            agg["flops"] += rec.flops
            agg["scalars"] += rec.scalars
        return totals


def _exec_contract(env, step, conv):
    a, b = env[step.ins[0]], env[step.ins[1]]
    spec = step.kw["spec"]
    out = contract(spec, a, b)
    return out, conv.contract_flops_per_mac * contract_macs(spec, a, b), out.numel


def _exec_softmax(env, step, conv):
    t = env[step.ins[0]]
    flops = (conv.softmax_exp_flops + conv.softmax_normalize_flops) * t.numel
    return softmax_lastdim(t), flops, 0


def _exec_scale(env, step, conv):
    t = env[step.ins[0]]
    return scale(t, step.kw["factor"]), conv.scale_flops * t.numel, 0


def _exec_rename(env, step, conv):
    return env[step.ins[0]].rename(step.kw["mapping"]), 0, 0


def _exec_add(env, step, conv):
    a, b = env[step.ins[0]], env[step.ins[1]]
    return add(a, b), (a.numel if conv.count_elementwise else 0), a.numel


def _exec_layer_norm(env, step, conv):
    t = env[step.ins[0]]
    out = layer_norm(t, step.kw["gamma"], step.kw["beta"], step.kw["eps"])
    flops = conv.norm_flops_per_element * t.numel if conv.count_normalization else 0
    return out, flops, 0


_COUNTED_OPS: dict[str, Callable] = {
    "contract": _exec_contract,
    "softmax_lastdim": _exec_softmax,
    "scale": _exec_scale,
    "rename": _exec_rename,
    "add": _exec_add,
    "layer_norm": _exec_layer_norm,
}


def counted_run(
    program: Program,
    inputs: dict[str, Tensor],
    convention: CountingConvention = DEFAULT_CONVENTION,
) -> CountedExecution:
    """Execute a program while billing each step under the convention.

    The executed values are exactly the ones the uncounted ops produce, so
    instrumentation can never perturb results.
    """
    env = dict(program.consts)
    env.update(inputs)
    log = []
    for step in program.steps:
        if step.op not in _COUNTED_OPS:
            raise UsageError(f"op '{step.op}' is not registered for counted execution")
        out, flops, scalars = _COUNTED_OPS[step.op](env, step, convention)
        env[step.out] = out
        log.append(OpRecord(step.out, step.stage, step.op, flops, scalars))
    return CountedExecution(
        output=env[program.output],
        flops=sum(r.flops for r in log),
        peak_scalars=sum(r.scalars for r in log),
        log=tuple(log),
    )


def lintention_program(params: LintentionParams) -> Program:
    """The attention module as primitive steps, tagged by generator."""
    inv = 1.0 / math.sqrt(params.channels)
    steps = (
        Step("q_d", "contract", ("x", "wq"), "QG", {"spec": QUERY_SPEC}),
        Step("q", "rename", ("q_d",), "QG", {"mapping": {"d": "c"}}),
        Step("l_raw", "contract", ("x", "wk"), "KG", {"spec": CLASSIFY_SPEC}),
        Step("l", "softmax_lastdim", ("l_raw",), "KG"),
        Step("k", "contract", ("l", "q"), "KG", {"spec": AGGREGATE_SPEC}),
        Step("v_d", "contract", ("k", "wv"), "VG", {"spec": VALUE_SPEC}),
        Step("v", "rename", ("v_d",), "VG", {"mapping": {"d": "c"}}),
        Step("a", "contract", ("k", "q"), "ASG", {"spec": SCORE_SPEC}),
        Step("a_s", "scale", ("a",), "ASG", {"factor": inv}),
        Step("s", "softmax_lastdim", ("a_s",), "ASG"),
        Step("y", "contract", ("s", "v"), "RG", {"spec": RESULT_SPEC}),
    )
    return Program(
        steps=steps,
        consts={"wq": params.wq, "wk": params.wk, "wv": params.wv},
        output="y",
    )


_SA_PROJ = EinsumSpec.parse("nsc,cd->nsd")
_SA_SCORE = EinsumSpec.parse("ntc,nsc->nst")
_SA_MIX = EinsumSpec.parse("nst,ntc->nsc")


def self_attention_program(wq: Tensor, wk: Tensor, wv: Tensor, channels: int) -> Program:
    """Textbook scaled dot-product attention over the flattened pixel axis:
    every pixel attends to every pixel. Quadratic foil for the linear module."""
    inv = 1.0 / math.sqrt(channels)
    steps = (
        Step("q_d", "contract", ("x", "wq"), "QG", {"spec": _SA_PROJ}),
        Step("q", "rename", ("q_d",), "QG", {"mapping": {"d": "c"}}),
        Step("k_d", "contract", ("x", "wk"), "KG", {"spec": _SA_PROJ}),
        Step("k", "rename", ("k_d",), "KG", {"mapping": {"d": "c", "s": "t"}}),
        Step("v_d", "contract", ("x", "wv"), "VG", {"spec": _SA_PROJ}),
        Step("v", "rename", ("v_d",), "VG", {"mapping": {"d": "c", "s": "t"}}),
        Step("a", "contract", ("k", "q"), "ASG", {"spec": _SA_SCORE}),
        Step("a_s", "scale", ("a",), "ASG", {"factor": inv}),
        Step("s", "softmax_lastdim", ("a_s",), "ASG"),
        Step("y", "contract", ("s", "v"), "RG", {"spec": _SA_MIX}),
    )
    return Program(steps=steps, consts={"wq": wq, "wk": wk, "wv": wv}, output="y")


def standard_self_attention(x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor) -> Tensor:
    """Quadratic reference attention on an (n,h,w,c) tensor."""
    c = x.extent("c")
    for name, m in (("wq", wq), ("wk", wk), ("wv", wv)):
        if m.data.shape != (c, c):
            raise UsageError(f"{name} must be {c}x{c}, got {m.data.shape}")
    n, h, w = x.extent("n"), x.extent("h"), x.extent("w")
    flat = Tensor(("n", "s", "c"), x.data.reshape(n, h * w, c))
    run = counted_run(self_attention_program(wq, wk, wv, c), {"x": flat})
    return Tensor(("n", "h", "w", "c"), run.output.data.reshape(n, h, w, c))


def branch_forward_loop(features, weights) -> list:
    """Composed loop-oracle forward pass of a whole semantic branch.

    Interprets the same stage plan as the fast path but executes every stage
    with the scalar oracles above. Returns nested (class, h, w) logits.
    """
    from .branches import BranchWeights, FpnFeatures  # noqa: F401  (types only)

    def run_stage(st, x):
        p = weights.params.get(st.name)
        if st.kind == "conv":
            return loop_conv2d(
                x,
                p.weights.data.tolist(),
                groups=p.groups,
                bias=None if p.bias is None else p.bias.tolist(),
            )
        if st.kind == "pyconv":
            kernels = [(k.weights.data.tolist(), k.groups) for k in p.kernels]
            ses = [
                (s.w_reduce.tolist(), s.b_reduce.tolist(), s.w_expand.tolist(), s.b_expand.tolist())
                for s in p.se
            ] or None
            return loop_pyconv(x, kernels, ses)
        if st.kind == "se":
            return loop_se_gate(
                x, p.w_reduce.tolist(), p.b_reduce.tolist(), p.w_expand.tolist(), p.b_expand.tolist()
            )
        if st.kind == "groupnorm":
            return loop_group_norm(x, p.gamma.tolist(), p.beta.tolist(), p.groups, p.eps)
        if st.kind == "relu":
            return loop_relu(x)
        if st.kind == "upsample2x":
            return loop_upsample2x(x)
        if st.kind == "attention":
            return loop_lintention_layer(
                x,
                p.core.wq.data.tolist(),
                p.core.wk.data.tolist(),
                p.core.wv.data.tolist(),
                p.gamma.tolist(),
                p.beta.tolist(),
                p.eps,
            )
        raise UsageError(f"stage kind '{st.kind}' has no loop oracle")

    outs = {}
    merge = []
    for st in weights.plan:
        if st.level == "merge":
            merge.append(st)
    for level in ("p2", "p3", "p4", "p5"):
        x = features.level(level).data.tolist()
        for st in weights.plan:
            if st.level == level:
                x = run_stage(st, x)
        outs[level] = x

    n, h, w, c = _shape_of(outs["p2"])
    acc = _zeros((n, h, w, c))
    for ni in range(n):
        for i in range(h):
            for j in range(w):
                for ci in range(c):
                    acc[ni][i][j][ci] = sum(outs[lv][ni][i][j][ci] for lv in ("p2", "p3", "p4", "p5"))
    x = acc
    for st in merge:
        if st.kind == "merge_sum":
            continue
        x = run_stage(st, x)

    _, h, w, c = _shape_of(x)
    return [[[x[0][i][j][ci] for j in range(w)] for i in range(h)] for ci in range(c)]


# ---------------------------------------------------------------------------
# Gradient checking.


@dataclass(frozen=True)
class GradcheckResult:
    max_rel_err: float
    per_input: dict[str, float]
    tol: float
    step: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def to_json_dict(self) -> dict:
        return {
            "max_rel_err": self.max_rel_err,
            "per_input": dict(self.per_input),
            "tol": self.tol,
            "step": self.step,
            "passed": self.passed,
        }


def gradcheck(
    loss: Callable[[dict[str, np.ndarray]], float],
    inputs: dict[str, np.ndarray],
    analytic: dict[str, np.ndarray],
    step: float = 1e-5,
    tol: float = 1e-6,
) -> GradcheckResult:
    """Central differences per scalar input against the analytic gradient.

    Relative error per element is |a - n| / max(|a|, |n|, 1); the report
    carries the maximum over every element of every checked input.
    """
    if step <= 0 or tol <= 0:
        raise UsageError("step and tol must be positive")
    per_input: dict[str, float] = {}
    work = {k: np.array(v, dtype=np.float64) for k, v in inputs.items()}
    for name in inputs:
        a = np.asarray(analytic[name], dtype=np.float64)
        x = work[name]
        if a.shape != x.shape:
            raise UsageError(f"analytic gradient for '{name}' has shape {a.shape}, input {x.shape}")
        num = np.zeros_like(x)
        flat = x.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss(work)
            flat[i] = orig - step
            lo = loss(work)
            flat[i] = orig
            nflat[i] = (hi - lo) / (2.0 * step)
        if not (np.isfinite(num).all() and np.isfinite(a).all()):
            raise NumericError(f"non-finite values while checking '{name}'")
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1.0)
        per_input[name] = float((np.abs(a - num) / denom).max()) if a.size else 0.0
    worst = max(per_input.values()) if per_input else 0.0
    return GradcheckResult(max_rel_err=worst, per_input=per_input, tol=tol, step=step)


def init_self_attention_params(seed: int, c: int) -> tuple[Tensor, Tensor, Tensor]:
    """Three square (c,d) projections from one seeded stream."""
    from .rng import SplitMix64

    stream = SplitMix64(seed)
    bound = 1.0 / math.sqrt(c)
    wq, wk, wv = (Tensor(("c", "d"), stream.fill((c, c), -bound, bound)) for _ in range(3))
    return wq, wk, wv


def run_gradcheck_suite(seed: int = 5, step: float = 1e-5, tol: float = 1e-6) -> dict[str, GradcheckResult]:
    """Central-difference checks for every registered op plus the attention
    composites. Inputs drawn in [-1, 1]; 64-bit throughout."""
    from .autodiff import vjp
    from .lintention import (
        LintentionLayerParams,
        LintentionParams as _LP,
        init_params,
        lintention_backward,
        lintention_forward,
        lintention_layer_backward,
        lintention_layer_forward,
    )
    from .rng import SplitMix64
    from .tensor import ConvKernel, bilinear_upsample2x, conv2d

    stream = SplitMix64(seed)

    def draw(shape):
        return stream.fill(shape, -1.0, 1.0)

    results: dict[str, GradcheckResult] = {}

    # contract: gradient of a bilinear map.
    spec = AGGREGATE_SPEC
    a0, b0 = draw((1, 2, 2, 2)), draw((1, 2, 2, 3))
    u = Tensor(("n", "p", "c"), draw((1, 2, 3)))
    da, db = vjp(
        "contract", [Tensor(spec.lhs, a0), Tensor(spec.rhs, b0)], u, spec=spec
    )
    results["contract"] = gradcheck(
        lambda d: float(
            (contract(spec, Tensor(spec.lhs, d["a"]), Tensor(spec.rhs, d["b"])).data * u.data).sum()
        ),
        {"a": a0, "b": b0},
        {"a": da.data, "b": db.data},
        step,
        tol,
    )

    t0 = draw((2, 4))
    u = Tensor(("n", "c"), draw((2, 4)))
    (dt,) = vjp("softmax_lastdim", [Tensor(("n", "c"), t0)], u)
    results["softmax_lastdim"] = gradcheck(
        lambda d: float((softmax_lastdim(Tensor(("n", "c"), d["t"])).data * u.data).sum()),
        {"t": t0},
        {"t": dt.data},
        step,
        tol,
    )

    t0, g0, b0 = draw((3, 4)), draw((4,)), draw((4,))
    u = Tensor(("n", "c"), draw((3, 4)))
    eps = 1e-5
    dt, dg, dbt = vjp("layer_norm", [Tensor(("n", "c"), t0)], u, gamma=g0, beta=b0, eps=eps)
    results["layer_norm"] = gradcheck(
        lambda d: float(
            (layer_norm(Tensor(("n", "c"), d["t"]), d["gamma"], d["beta"], eps).data * u.data).sum()
        ),
        {"t": t0, "gamma": g0, "beta": b0},
        {"t": dt.data, "gamma": dg.data, "beta": dbt.data},
        step,
        tol,
    )

    t0 = draw((1, 2, 3, 2))
    axes = ("n", "h", "w", "c")
    u = Tensor(axes, draw((1, 4, 6, 2)))
    (dt,) = vjp("bilinear_upsample2x", [Tensor(axes, t0)], u)
    results["bilinear_upsample2x"] = gradcheck(
        lambda d: float((bilinear_upsample2x(Tensor(axes, d["t"])).data * u.data).sum()),
        {"t": t0},
        {"t": dt.data},
        step,
        tol,
    )

    for label, (cin, cout, groups) in (("conv2d", (2, 2, 1)), ("conv2d_grouped", (4, 2, 2))):
        x0 = draw((1, 3, 3, cin))
        w0 = draw((cout, cin // groups, 3, 3))
        bias0 = draw((cout,))

        def kernel_of(d):
            return ConvKernel(
                weights=Tensor(("o", "i", "kh", "kw"), d["w"]), groups=groups, bias=d["bias"]
            )

        u = Tensor(axes, draw((1, 3, 3, cout)))
        dx, dw, dbias = vjp(
            "conv2d", [Tensor(axes, x0)], u, kernel=kernel_of({"w": w0, "bias": bias0})
        )
        results[label] = gradcheck(
            lambda d: float((conv2d(Tensor(axes, d["x"]), kernel_of(d)).data * u.data).sum()),
            {"x": x0, "w": w0, "bias": bias0},
            {"x": dx.data, "w": dw.data, "bias": dbias.data},
            step,
            tol,
        )

    params = init_params(stream.next_u64(), 3, 2)
    x0 = draw((1, 2, 2, 3))
    u = Tensor(axes, draw((1, 2, 2, 3)))

    def lint_params(d):
        return _LP(
            wq=Tensor(("c", "d"), d["wq"]),
            wk=Tensor(("c", "p"), d["wk"]),
            wv=Tensor(("c", "d"), d["wv"]),
        )

    dx, dwq, dwk, dwv = lintention_backward(Tensor(axes, x0), params, u)
    results["lintention_forward"] = gradcheck(
        lambda d: float(
            (lintention_forward(Tensor(axes, d["x"]), lint_params(d))[0].data * u.data).sum()
        ),
        {"x": x0, "wq": params.wq.data, "wk": params.wk.data, "wv": params.wv.data},
        {"x": dx.data, "wq": dwq.data, "wk": dwk.data, "wv": dwv.data},
        step,
        tol,
    )

    g0, b0 = draw((3,)), draw((3,))
    layer = LintentionLayerParams(core=params, gamma=g0, beta=b0)
    dx, dwq, dwk, dwv, dg, dbt = lintention_layer_backward(Tensor(axes, x0), layer, u)
    results["lintention_layer"] = gradcheck(
        lambda d: float(
            (
                lintention_layer_forward(
                    Tensor(axes, d["x"]),
                    LintentionLayerParams(core=lint_params(d), gamma=d["gamma"], beta=d["beta"]),
                ).data
                * u.data
            ).sum()
        ),
        {
            "x": x0,
            "wq": params.wq.data,
            "wk": params.wk.data,
            "wv": params.wv.data,
            "gamma": g0,
            "beta": b0,
        },
        {
            "x": dx.data,
            "wq": dwq.data,
            "wk": dwk.data,
            "wv": dwv.data,
            "gamma": dg.data,
            "beta": dbt.data,
        },
        step,
        tol,
    )
    return results


# ---------------------------------------------------------------------------
# Brute-force panoptic quality.


def brute_force_pq(pred: PanopticMap, gt: PanopticMap) -> dict:
    """All-pairs matcher over explicit pixel sets; returns per-class counts.

    Kept deliberately simple: pixel sets are Python sets, every same-class
    (pred, gt) pair is scored, the strict >0.5 rule is applied directly.
    """
    h, w = pred.height, pred.width

    def collect(m: PanopticMap):
        own: dict[tuple[int, int], set] = {}
        for i in range(h):
            for j in range(w):
                inst = int(m.instance_ids[i, j])
                if inst <= 0:
                    continue  # void pixels belong to no segment
                own.setdefault((int(m.class_ids[i, j]), inst), set()).add((i, j))
        return own

    pred_own = collect(pred)
    gt_own = collect(gt)

    per_class: dict[int, dict] = {}

    def cls_entry(cls):
        return per_class.setdefault(cls, {"tp": 0, "fp": 0, "fn": 0, "iou_sum": 0.0})

    matched_pred = set()
    matched_gt = set()
    for p_seg in sorted(pred_own):
        for g_seg in sorted(gt_own):
            if p_seg[0] != g_seg[0]:
                continue
            a = pred_own[p_seg]
            b = gt_own[g_seg]
            union = len(a | b)
            if union == 0:
                continue
            overlap = len(a & b) / union
            if overlap > 0.5:
                assert p_seg not in matched_pred and g_seg not in matched_gt
                matched_pred.add(p_seg)
                matched_gt.add(g_seg)
                entry = cls_entry(p_seg[0])
                entry["tp"] += 1
                entry["iou_sum"] += overlap
    for p_seg in pred_own:
        if p_seg not in matched_pred:
            cls_entry(p_seg[0])["fp"] += 1
    for g_seg in gt_own:
        if g_seg not in matched_gt:
            cls_entry(g_seg[0])["fn"] += 1
    return per_class
