"""Linear group-attention ("Lintention").

Instead of letting every pixel attend to every other pixel, the input is
classified into a small number P of learned semantic groups; keys and values
are built per group by aggregating over the whole spatial extent, so each
pixel only attends to P prototypes. Time and memory are linear in the pixel
count.

Five generators compose the module:
  query QG       q = x . wq                              (n,h,w,c)
  key KG         l = softmax(x . wk); k = sum_hw l*q     (n,h,w,p), (n,p,c)
  value VG       v = k . wv                              (n,p,c)
  scores ASG     s = softmax((k . q) / sqrt(C))          (n,h,w,p)
  result RG      y = s . v                               (n,h,w,c)

The layer variant adds a skip connection and layer normalization:
  layer(x) = layer_norm(x + module(x)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import vjp
from .errors import ConfigError, DimensionError
from .rng import SplitMix64
from .tensor import EinsumSpec, Tensor, add, contract, layer_norm, scale, softmax_lastdim

DEFAULT_GROUPS = 16

QUERY_SPEC = EinsumSpec.parse("nhwc,cd->nhwd")
CLASSIFY_SPEC = EinsumSpec.parse("nhwc,cp->nhwp")
AGGREGATE_SPEC = EinsumSpec.parse("nhwp,nhwc->npc")
VALUE_SPEC = EinsumSpec.parse("npc,cd->npd")
SCORE_SPEC = EinsumSpec.parse("npc,nhwc->nhwp")
RESULT_SPEC = EinsumSpec.parse("nhwp,npc->nhwc")


@dataclass(frozen=True)
class LintentionParams:
    """Learned projections: wq (C x C), wk (C x P), wv (C x C)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor

    def __post_init__(self):
        c = self.wq.data.shape[0]
        if self.wq.data.shape != (c, c) or self.wv.data.shape != (c, c):
            raise ConfigError("wq and wv must be square with matching side")
        if self.wk.data.shape[0] != c:
            raise ConfigError("wk row count must equal the channel count")

    @property
    def channels(self) -> int:
        return int(self.wq.data.shape[0])

    @property
    def groups(self) -> int:
        return int(self.wk.data.shape[1])

    def param_count(self) -> int:
        return self.wq.numel + self.wk.numel + self.wv.numel


@dataclass(frozen=True)
class LintentionLayerParams:
    core: LintentionParams
    gamma: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        g = np.asarray(self.gamma, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if g.shape != (self.core.channels,) or b.shape != (self.core.channels,):
            raise ConfigError("gamma/beta length must equal the channel count")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "beta", b)

    def param_count(self) -> int:
        return self.core.param_count() + 2 * self.core.channels


@dataclass(frozen=True)
class LintentionTrace:
    q: Tensor
    l: Tensor
    k: Tensor
    v: Tensor
    scores: Tensor
    y: Tensor


def _check_input(x: Tensor, p: LintentionParams):
    if x.axes != ("n", "h", "w", "c"):
        raise DimensionError(f"input needs axes (n,h,w,c), got {x.axes}")
    if x.extent("c") != p.channels:
        raise DimensionError(
            f"axis 'c' has extent {x.extent('c')}, params expect {p.channels}"
        )


def query_gen(x: Tensor, p: LintentionParams) -> Tensor:
    _check_input(x, p)
    return contract(QUERY_SPEC, x, p.wq).rename({"d": "c"})


def key_gen(x: Tensor, q: Tensor, p: LintentionParams) -> tuple[Tensor, Tensor]:
    """Per-pixel group probabilities l and the P spatially-aggregated keys."""
    _check_input(x, p)
    l = softmax_lastdim(contract(CLASSIFY_SPEC, x, p.wk))
    k = contract(AGGREGATE_SPEC, l, q)
    return l, k


def value_gen(k: Tensor, p: LintentionParams) -> Tensor:
    return contract(VALUE_SPEC, k, p.wv).rename({"d": "c"})


def attention_scores(q: Tensor, k: Tensor) -> Tensor:
    """Scaled dot-product similarity of each pixel against the P keys."""
    c_q, c_k = q.extent("c"), k.extent("c")
    if c_q != c_k:
        raise DimensionError(f"axis 'c' has extent {c_q} in q vs {c_k} in k")
    logits = scale(contract(SCORE_SPEC, k, q), 1.0 / math.sqrt(c_q))
    return softmax_lastdim(logits)


def result_gen(scores: Tensor, v: Tensor) -> Tensor:
    p_s, p_v = scores.extent("p"), v.extent("p")
    if p_s != p_v:
        raise DimensionError(f"axis 'p' has extent {p_s} in scores vs {p_v} in v")
    return contract(RESULT_SPEC, scores, v)


def lintention_forward(x: Tensor, p: LintentionParams) -> tuple[Tensor, LintentionTrace]:
    q = query_gen(x, p)
    l, k = key_gen(x, q, p)
    v = value_gen(k, p)
    s = attention_scores(q, k)
    y = result_gen(s, v)
    return y, LintentionTrace(q=q, l=l, k=k, v=v, scores=s, y=y)


def lintention_layer_forward(x: Tensor, p: LintentionLayerParams) -> Tensor:
    y, _ = lintention_forward(x, p.core)
    return layer_norm(add(x, y), p.gamma, p.beta, p.eps)


def lintention_backward(
    x: Tensor, p: LintentionParams, upstream: Tensor
) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Gradients of sum(upstream * y) w.r.t. (x, wq, wk, wv).

    Chains the per-op vjp rules through the five generators.
    """
    q = query_gen(x, p)
    logits = contract(CLASSIFY_SPEC, x, p.wk)
    l = softmax_lastdim(logits)
    k = contract(AGGREGATE_SPEC, l, q)
    v = value_gen(k, p)
    raw = contract(SCORE_SPEC, k, q)
    scaled = scale(raw, 1.0 / math.sqrt(p.channels))

    ds, dv = vjp("contract", [softmax_lastdim(scaled), v], upstream, spec=RESULT_SPEC)
    (dscaled,) = vjp("softmax_lastdim", [scaled], ds)
    draw = scale(dscaled, 1.0 / math.sqrt(p.channels))
    dk, dq = vjp("contract", [k, q], draw, spec=SCORE_SPEC)

    dk2, dwv = vjp(
        "contract", [k, p.wv], dv.rename({"c": "d"}), spec=VALUE_SPEC
    )
    dk = add(dk, dk2)

    dl, dq2 = vjp("contract", [l, q], dk, spec=AGGREGATE_SPEC)
    dq = add(dq, dq2)

    (dlogits,) = vjp("softmax_lastdim", [logits], dl)
    dx_k, dwk = vjp("contract", [x, p.wk], dlogits, spec=CLASSIFY_SPEC)

    dx_q, dwq = vjp(
        "contract", [x, p.wq], dq.rename({"c": "d"}), spec=QUERY_SPEC
    )
    dx = add(dx_q, dx_k)
    return dx, dwq, dwk, dwv


def lintention_layer_backward(
    x: Tensor, p: LintentionLayerParams, upstream: Tensor
) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Gradients of sum(upstream * layer(x)) w.r.t. (x, wq, wk, wv, gamma, beta)."""
    y, _ = lintention_forward(x, p.core)
    z = add(x, y)
    dz, dgamma, dbeta = vjp(
        "layer_norm", [z], upstream, gamma=p.gamma, beta=p.beta, eps=p.eps
    )
    dx_core, dwq, dwk, dwv = lintention_backward(x, p.core, dz)
    dx = add(dz, dx_core)
    return dx, dwq, dwk, dwv, dgamma, dbeta


def init_params(seed: int, c: int, p: int = DEFAULT_GROUPS) -> LintentionParams:
    """Seeded uniform(-1/sqrt(c), 1/sqrt(c)) init; draw order wq, wk, wv."""
    if c < 1 or p < 1:
        raise ConfigError("channel and group counts must be >= 1")
    stream = SplitMix64(seed)
    bound = 1.0 / math.sqrt(c)
    wq = Tensor(("c", "d"), stream.fill((c, c), -bound, bound))
    wk = Tensor(("c", "p"), stream.fill((c, p), -bound, bound))
    wv = Tensor(("c", "d"), stream.fill((c, c), -bound, bound))
    return LintentionParams(wq=wq, wk=wk, wv=wv)


def init_layer_params(seed: int, c: int, p: int = DEFAULT_GROUPS, eps: float = 1e-5) -> LintentionLayerParams:
    core = init_params(seed, c, p)
    return LintentionLayerParams(core=core, gamma=np.ones(c), beta=np.zeros(c), eps=eps)
