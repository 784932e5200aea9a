"""Reverse-mode vector-Jacobian products for the core op set.

Each rule takes the op's original inputs plus the upstream cotangent (same
shape as the op's output) and returns one gradient per input. Rules are
registered by op id; composites chain these rules by hand.
"""

from __future__ import annotations

import string

import numpy as np

from .errors import DimensionError, UsageError
from .tensor import ConvKernel, EinsumSpec, Tensor, layer_norm, softmax_lastdim


def _einsum_grad(
    target: tuple[str, ...],
    u_axes: tuple[str, ...],
    u: np.ndarray,
    other_axes: tuple[str, ...],
    other: np.ndarray,
    extents: dict[str, int],
) -> np.ndarray:
    """d(target operand) for out = contract(target, other): one more contraction.

    Axes of the target that appear in neither the upstream nor the other
    operand were plain summations in the forward pass, so the gradient
    broadcasts along them.
    """
    names = tuple(dict.fromkeys(u_axes + other_axes + target))
    letters = {n: string.ascii_letters[i] for i, n in enumerate(names)}
    present = tuple(a for a in target if a in u_axes or a in other_axes)
    eq = (
        "".join(letters[a] for a in u_axes)
        + ","
        + "".join(letters[a] for a in other_axes)
        + "->"
        + "".join(letters[a] for a in present)
    )
    g = np.einsum(eq, u, other)
    if present != target:
        for pos, a in enumerate(target):
            if a not in present:
                g = np.expand_dims(g, pos)
        g = np.broadcast_to(g, tuple(extents[a] for a in target)).copy()
    return g


def vjp_contract(spec: EinsumSpec, a: Tensor, b: Tensor, upstream: Tensor) -> list[Tensor]:
    if upstream.axes != spec.out:
        raise DimensionError(
            f"upstream axes {upstream.axes} do not match spec output {spec.out}"
        )
    extents = dict(a.shape) | dict(b.shape)
    da = _einsum_grad(spec.lhs, spec.out, upstream.data, spec.rhs, b.data, extents)
    db = _einsum_grad(spec.rhs, spec.out, upstream.data, spec.lhs, a.data, extents)
    return [Tensor(spec.lhs, da), Tensor(spec.rhs, db)]


def vjp_softmax_lastdim(t: Tensor, upstream: Tensor) -> list[Tensor]:
    s = softmax_lastdim(t).data
    u = upstream.data
    dot = (u * s).sum(axis=-1, keepdims=True)
    return [Tensor(t.axes, s * (u - dot))]


def vjp_layer_norm(t: Tensor, gamma, beta, eps: float, upstream: Tensor) -> list[Tensor]:
    gamma = np.asarray(gamma, dtype=np.float64)
    x = t.data
    u = upstream.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    gu = u * gamma
    dx = inv * (
        gu
        - gu.mean(axis=-1, keepdims=True)
        - xhat * (gu * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(x.ndim - 1))
    dgamma = (u * xhat).sum(axis=lead)
    dbeta = u.sum(axis=lead)
    last = (t.axes[-1],)
    return [Tensor(t.axes, dx), Tensor(last, dgamma), Tensor(last, dbeta)]


def vjp_bilinear_upsample2x(t: Tensor, upstream: Tensor) -> list[Tensor]:
    from .tensor import _axis_index, _up2x_taps

    g = upstream.data
    for name in ("w", "h"):
        axis = _axis_index(t, name)
        n = t.data.shape[axis]
        i0, i1, w = _up2x_taps(n)
        moved = np.moveaxis(g, axis, 0)
        acc = np.zeros((n,) + moved.shape[1:], dtype=np.float64)
        wcol = w.reshape((-1,) + (1,) * (moved.ndim - 1))
        np.add.at(acc, i0, moved * (1.0 - wcol))
        np.add.at(acc, i1, moved * wcol)
        g = np.moveaxis(acc, 0, axis)
    return [Tensor(t.axes, g)]


def vjp_conv2d(t: Tensor, k: ConvKernel, upstream: Tensor) -> list[Tensor]:
    """Gradients w.r.t. the input, the kernel weights, and (if present) the bias."""
    o, ipg, kh, kw = k.weights.data.shape
    ph, pw = k.padding
    n, h, w, c = t.data.shape
    xp = np.pad(t.data, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    u = upstream.data
    opg = o // k.groups
    dw = np.empty_like(k.weights.data)
    dxp = np.zeros_like(xp)
    for g in range(k.groups):
        ug = u[..., g * opg : (g + 1) * opg]
        xg = win[:, :, :, g * ipg : (g + 1) * ipg]
        dw[g * opg : (g + 1) * opg] = np.einsum("nhwikl,nhwo->oikl", xg, ug)
        # (n,h,w,kh,kw,i) contribution scattered back onto the padded input.
        contrib = np.einsum("nhwo,oikl->nhwkli", ug, k.weights.data[g * opg : (g + 1) * opg])
        for dh in range(kh):
            for dwd in range(kw):
                dxp[:, dh : dh + h, dwd : dwd + w, g * ipg : (g + 1) * ipg] += contrib[
                    :, :, :, dh, dwd, :
                ]
    dx = dxp[:, ph : ph + h, pw : pw + w, :]
    grads = [Tensor(t.axes, dx), Tensor(k.weights.axes, dw)]
    if k.bias is not None:
        grads.append(Tensor(("c",), u.sum(axis=(0, 1, 2))))
    return grads


def vjp(op: str, inputs: list[Tensor], upstream: Tensor, **kw) -> list[Tensor]:
    """Dispatch to the registered rule for `op`; unknown ids raise UsageError."""
    if op == "contract":
        return vjp_contract(kw["spec"], inputs[0], inputs[1], upstream)
    if op == "softmax_lastdim":
        return vjp_softmax_lastdim(inputs[0], upstream)
    if op == "layer_norm":
        return vjp_layer_norm(inputs[0], kw["gamma"], kw["beta"], kw["eps"], upstream)
    if op == "bilinear_upsample2x":
        return vjp_bilinear_upsample2x(inputs[0], upstream)
    if op == "conv2d":
        return vjp_conv2d(inputs[0], kw["kernel"], upstream)
    raise UsageError(f"no vjp registered for op '{op}'")


DIFFERENTIABLE_OPS = (
    "contract",
    "softmax_lastdim",
    "layer_norm",
    "bilinear_upsample2x",
    "conv2d",
)
