"""Dense float64 tensors with named axes and the small op set built on them.

Tensors are immutable by convention: every operation returns a new value and
never writes through its inputs, so values can be shared freely across
threads. All arithmetic is 64-bit; accumulation orders are whatever numpy
produces, which is deterministic run-to-run on a fixed platform.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError, UsageError


@dataclass(frozen=True)
class Tensor:
    """A rank-<=4-ish dense array whose dimensions carry names.

    axes: one name per dimension, unique within the tensor.
    data: float64 ndarray, row-major.
    """

    axes: tuple[str, ...]
    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "axes", tuple(self.axes))
        if len(self.axes) != arr.ndim:
            raise DimensionError(
                f"{len(self.axes)} axis names for a rank-{arr.ndim} array"
            )
        if len(set(self.axes)) != len(self.axes):
            raise DimensionError(f"duplicate axis name in {self.axes}")
        if any(e < 1 for e in arr.shape):
            raise DimensionError(f"zero-extent axis in shape {arr.shape}")

    @property
    def shape(self) -> tuple[tuple[str, int], ...]:
        return tuple(zip(self.axes, self.data.shape))

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def extent(self, axis: str) -> int:
        try:
            return int(self.data.shape[self.axes.index(axis)])
        except ValueError:
            raise DimensionError(f"no axis named '{axis}' in {self.axes}") from None

    def rename(self, mapping: dict[str, str]) -> "Tensor":
        """Metadata-only relabelling of axes; the data is shared."""
        return Tensor(tuple(mapping.get(a, a) for a in self.axes), self.data)


def tensor(data, axes: tuple[str, ...] | str) -> Tensor:
    """Convenience constructor; a string is split into one-char axis names."""
    if isinstance(axes, str):
        axes = tuple(axes)
    return Tensor(tuple(axes), np.asarray(data, dtype=np.float64))


@dataclass(frozen=True)
class EinsumSpec:
    """Binary contraction described by axis names: (lhs, rhs) -> out.

    Every output axis must appear in an input; axes present in both inputs
    (or in an input and the output) must agree in extent.
    """

    lhs: tuple[str, ...]
    rhs: tuple[str, ...]
    out: tuple[str, ...]

    def __post_init__(self):
        for part, name in ((self.lhs, "lhs"), (self.rhs, "rhs"), (self.out, "out")):
            if len(set(part)) != len(part):
                raise UsageError(f"duplicate axis in {name} subscripts {part}")
        missing = [a for a in self.out if a not in self.lhs and a not in self.rhs]
        if missing:
            raise UsageError(f"output axis '{missing[0]}' appears in no input")

    @classmethod
    def parse(cls, text: str) -> "EinsumSpec":
        """Parse "nhwc,cd->nhwd" style shorthand (single-char axis names)."""
        try:
            ins, out = text.split("->")
            lhs, rhs = ins.split(",")
        except ValueError:
            raise UsageError(f"cannot parse einsum spec '{text}'") from None
        return cls(tuple(lhs), tuple(rhs), tuple(out))

    def contracted_axes(self) -> tuple[str, ...]:
        return tuple(
            a for a in dict.fromkeys(self.lhs + self.rhs) if a not in self.out
        )


def _letters_for(names: tuple[str, ...]) -> dict[str, str]:
    return {n: string.ascii_letters[i] for i, n in enumerate(names)}


def _check_operand(spec_part: tuple[str, ...], t: Tensor, side: str):
    if t.axes != spec_part:
        raise DimensionError(
            f"{side} tensor has axes {t.axes}, spec expects {spec_part}"
        )


def contract(spec: EinsumSpec, a: Tensor, b: Tensor) -> Tensor:
    """Sum-of-products contraction over every axis absent from spec.out."""
    _check_operand(spec.lhs, a, "lhs")
    _check_operand(spec.rhs, b, "rhs")
    extents: dict[str, int] = {}
    for t in (a, b):
        for name, e in t.shape:
            if extents.setdefault(name, e) != e:
                raise DimensionError(
                    f"axis '{name}' has extent {extents[name]} vs {e}"
                )
    letters = _letters_for(tuple(dict.fromkeys(spec.lhs + spec.rhs)))
    eq = (
        "".join(letters[x] for x in spec.lhs)
        + ","
        + "".join(letters[x] for x in spec.rhs)
        + "->"
        + "".join(letters[x] for x in spec.out)
    )
    return Tensor(spec.out, np.einsum(eq, a.data, b.data))


def contract_macs(spec: EinsumSpec, a: Tensor, b: Tensor) -> int:
    """Multiply-accumulate count: product of extents over all distinct axes."""
    extents: dict[str, int] = {}
    for t in (a, b):
        extents.update(dict(t.shape))
    macs = 1
    for e in extents.values():
        macs *= e
    return macs


def softmax_lastdim(t: Tensor) -> Tensor:
    """Stable softmax along the last axis (max subtracted before exp)."""
    if t.data.ndim < 1:
        raise DimensionError("softmax needs rank >= 1")
    if not np.isfinite(t.data).all():
        raise NumericError("softmax input contains non-finite values")
    shifted = t.data - t.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return Tensor(t.axes, e / e.sum(axis=-1, keepdims=True))


def scale(t: Tensor, factor: float) -> Tensor:
    return Tensor(t.axes, t.data * factor)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add shape mismatch {a.shape} vs {b.shape}")
    return Tensor(a.axes, a.data + b.data)


def layer_norm(t: Tensor, gamma, beta, eps: float) -> Tensor:
    """Normalize each last-axis slice to zero mean / unit variance, then affine."""
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    c = t.data.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"gamma/beta must have length {c} (axis '{t.axes[-1]}')"
        )
    if eps <= 0:
        raise ConfigError("layer_norm eps must be > 0")
    mu = t.data.mean(axis=-1, keepdims=True)
    var = t.data.var(axis=-1, keepdims=True)
    xhat = (t.data - mu) / np.sqrt(var + eps)
    return Tensor(t.axes, xhat * gamma + beta)


def _up2x_taps(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # Half-pixel centers: src = (dst + 0.5)/2 - 0.5, clamped to the edge.
    dst = np.arange(2 * n, dtype=np.float64)
    src = np.clip((dst + 0.5) / 2.0 - 0.5, 0.0, n - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, src - i0


def _up2x_along(arr: np.ndarray, axis: int) -> np.ndarray:
    i0, i1, w = _up2x_taps(arr.shape[axis])
    shape = [1] * arr.ndim
    shape[axis] = w.size
    w = w.reshape(shape)
    return np.take(arr, i0, axis=axis) * (1.0 - w) + np.take(arr, i1, axis=axis) * w


def bilinear_upsample2x(t: Tensor) -> Tensor:
    """Double the 'h' and 'w' extents with edge-clamped bilinear interpolation."""
    hi = _axis_index(t, "h")
    wi = _axis_index(t, "w")
    return Tensor(t.axes, _up2x_along(_up2x_along(t.data, hi), wi))


def _axis_index(t: Tensor, name: str) -> int:
    try:
        return t.axes.index(name)
    except ValueError:
        raise DimensionError(f"tensor {t.axes} has no '{name}' axis") from None


@dataclass(frozen=True)
class ConvKernel:
    """Grouped 2-D cross-correlation weights.

    weights axes: (o, i, kh, kw) with i = input channels per group.
    padding defaults to (kh//2, kw//2), the same-size geometry; odd kernel
    extents are required so that geometry is exact.
    """

    weights: Tensor
    groups: int = 1
    padding: tuple[int, int] | None = None
    bias: np.ndarray | None = field(default=None)

    def __post_init__(self):
        if self.weights.axes != ("o", "i", "kh", "kw"):
            raise ConfigError(
                f"kernel weights need axes ('o','i','kh','kw'), got {self.weights.axes}"
            )
        o, _, kh, kw = self.weights.data.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError(f"kernel extents must be odd, got {kh}x{kw}")
        if self.groups < 1 or o % self.groups != 0:
            raise ConfigError(f"out channels {o} not divisible by groups {self.groups}")
        if self.padding is None:
            object.__setattr__(self, "padding", (kh // 2, kw // 2))
        elif tuple(self.padding) != (kh // 2, kw // 2):
            raise ConfigError(
                f"padding {self.padding} does not preserve size for {kh}x{kw}"
            )
        if self.bias is not None:
            b = np.asarray(self.bias, dtype=np.float64)
            if b.shape != (o,):
                raise ConfigError(f"bias length {b.shape} != out channels {o}")
            object.__setattr__(self, "bias", b)

    @property
    def out_channels(self) -> int:
        return int(self.weights.data.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.weights.data.shape[1]) * self.groups

    def param_count(self) -> int:
        n = self.weights.numel
        if self.bias is not None:
            n += self.bias.size
        return int(n)


def conv2d(t: Tensor, k: ConvKernel) -> Tensor:
    """Same-padded grouped cross-correlation over an (n, h, w, c) tensor."""
    if t.axes != ("n", "h", "w", "c"):
        raise DimensionError(f"conv2d input needs axes (n,h,w,c), got {t.axes}")
    o, ipg, kh, kw = k.weights.data.shape
    c = t.data.shape[-1]
    if ipg * k.groups != c:
        raise ConfigError(
            f"kernel covers {ipg}x{k.groups} input channels, tensor has {c}"
        )
    ph, pw = k.padding
    xp = np.pad(t.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    # win: (n, h, w, c, kh, kw); group outputs concatenate along o in order.
    opg = o // k.groups
    parts = []
    for g in range(k.groups):
        wg = k.weights.data[g * opg : (g + 1) * opg]
        xg = win[:, :, :, g * ipg : (g + 1) * ipg]
        parts.append(np.einsum("nhwikl,oikl->nhwo", xg, wg))
    out = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=-1)
    if k.bias is not None:
        out = out + k.bias
    return Tensor(("n", "h", "w", "c"), out)


def relu(t: Tensor) -> Tensor:
    return Tensor(t.axes, np.maximum(t.data, 0.0))


def sigmoid(t: Tensor) -> Tensor:
    # Two-branch form avoids overflow in exp for large |x|.
    x = t.data
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor(t.axes, out)
