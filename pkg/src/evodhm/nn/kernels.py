"""Vectorized forward/backward kernels on channels-last numpy arrays.

Images are ``(H, W, C)`` or batched ``(N, H, W, C)``. Convolution is
cross-correlation (no kernel flip) with zero padding. Weight layouts:

* standard / pointwise: ``(k, k, C_in, C_out)``
* depthwise:            ``(k, k, C)``
* fully connected:      ``(out, in)``
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ContractViolation
from .numerics import check_finite

MODES = ("standard", "depthwise", "pointwise")


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    in_channels: int
    out_channels: int
    stride: int = 1
    padding: int | None = None     # None means "same": (k - 1) // 2
    mode: str = "standard"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractViolation(f"unknown conv mode {self.mode!r}")
        if self.kernel_size < 1 or self.stride < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ContractViolation(f"invalid conv spec {self}")
        if self.mode == "depthwise" and self.in_channels != self.out_channels:
            raise ContractViolation("depthwise conv needs out_channels == in_channels")
        if self.mode == "pointwise" and self.kernel_size != 1:
            raise ContractViolation("pointwise conv needs kernel_size 1")

    @property
    def pad(self) -> int:
        return (self.kernel_size - 1) // 2 if self.padding is None else self.padding

    @property
    def weight_shape(self) -> tuple[int, ...]:
        k = self.kernel_size
        if self.mode == "depthwise":
            return (k, k, self.in_channels)
        return (k, k, self.in_channels, self.out_channels)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.pad
        ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ContractViolation(f"input {h}x{w} too small for {self}")
        return ho, wo


def _batched(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ContractViolation(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")


def _check(x, spec, weights):
    if x.shape[-1] != spec.in_channels:
        raise ContractViolation(f"input has {x.shape[-1]} channels, spec expects {spec.in_channels}")
    if tuple(weights.shape) != spec.weight_shape:
        raise ContractViolation(f"weights {weights.shape} do not match {spec.weight_shape}")


def _windows(spec, ho, wo):
    s = spec.stride
    for i in range(spec.kernel_size):
        for j in range(spec.kernel_size):
            yield i, j, (slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))


def conv2d_forward(x, spec: ConvSpec, weights, bias=None) -> np.ndarray:
    xb, squeeze = _batched(x)
    _check(xb, spec, weights)
    n, h, w, _ = xb.shape
    ho, wo = spec.output_size(h, w)
    p = spec.pad
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
    dtype = np.result_type(xb, weights)
    out = np.zeros((n, ho, wo, spec.out_channels), dtype=dtype)
    if spec.mode == "depthwise":
        for i, j, sl in _windows(spec, ho, wo):
            out += xp[sl] * weights[i, j]
    else:
        for i, j, sl in _windows(spec, ho, wo):
            out += xp[sl] @ weights[i, j]
    if bias is not None:
        out += bias
    check_finite(out, f"conv2d_forward[{spec.mode}]")
    return out[0] if squeeze else out


def conv2d_backward(grad_out, x, spec: ConvSpec, weights):
    """Returns ``(grad_input, grad_weights)``; the bias gradient is ``grad_out`` summed."""
    xb, squeeze = _batched(x)
    gb, _ = _batched(grad_out)
    _check(xb, spec, weights)
    n, h, w, _ = xb.shape
    ho, wo = spec.output_size(h, w)
    if gb.shape != (n, ho, wo, spec.out_channels):
        raise ContractViolation(f"grad_out shape {gb.shape} inconsistent with forward output")
    p = spec.pad
    xp = np.pad(xb, ((0, 0), (p, p), (p, p), (0, 0))) if p else xb
    gxp = np.zeros(xp.shape, dtype=np.result_type(gb, weights))
    gw = np.zeros(weights.shape, dtype=np.result_type(gb, xb))
    if spec.mode == "depthwise":
        for i, j, sl in _windows(spec, ho, wo):
            gw[i, j] = np.einsum("nhwc,nhwc->c", xp[sl], gb)
            gxp[sl] += gb * weights[i, j]
    else:
        flat_g = gb.reshape(-1, spec.out_channels)
        for i, j, sl in _windows(spec, ho, wo):
            gw[i, j] = xp[sl].reshape(-1, spec.in_channels).T @ flat_g
            gxp[sl] += gb @ weights[i, j].T
    gx = gxp[:, p:p + h, p:p + w] if p else gxp
    check_finite(gx, "conv2d_backward")
    return (gx[0] if squeeze else gx), gw


def bias_backward(grad_out) -> np.ndarray:
    g = np.asarray(grad_out)
    return g.reshape(-1, g.shape[-1]).sum(axis=0)


def tanh_forward(x):
    return check_finite(np.tanh(x), "tanh_forward")


def tanh_backward(grad, y):
    """``y`` is the forward output."""
    return grad * (1.0 - y * y)


def relu_forward(x):
    return check_finite(np.maximum(x, 0), "relu_forward")


def relu_backward(grad, x):
    return np.where(x > 0, grad, 0)


def maxpool_forward(x, size: int = 2):
    """Non-overlapping max pooling; returns ``(y, argmax)`` for the backward pass."""
    xb, squeeze = _batched(x)
    n, h, w, c = xb.shape
    if h % size or w % size:
        raise ContractViolation(f"maxpool size {size} does not divide {h}x{w}")
    blocks = xb.reshape(n, h // size, size, w // size, size, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // size, w // size, c, size * size)
    arg = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return (y[0] if squeeze else y), arg


def maxpool_backward(grad, argmax, size: int = 2):
    gb, squeeze = _batched(grad)
    n, ho, wo, c = gb.shape
    blocks = np.zeros((n, ho, wo, c, size * size), dtype=gb.dtype)
    np.put_along_axis(blocks, argmax[..., None], gb[..., None], axis=-1)
    gx = blocks.reshape(n, ho, wo, c, size, size).transpose(0, 1, 4, 2, 5, 3)
    gx = gx.reshape(n, ho * size, wo * size, c)
    return gx[0] if squeeze else gx


def fc_forward(x, weights, bias=None):
    """``x @ weights.T + bias`` for ``x`` of shape ``(in,)`` or ``(N, in)``."""
    x = np.asarray(x)
    if x.shape[-1] != weights.shape[1]:
        raise ContractViolation(f"fc input has {x.shape[-1]} features, weights expect {weights.shape[1]}")
    y = x @ weights.T
    if bias is not None:
        y = y + bias
    return check_finite(y, "fc_forward")


def fc_backward(grad, x, weights):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    g2 = np.atleast_2d(grad)
    x2 = np.atleast_2d(x)
    gx = np.asarray(grad) @ weights
    return gx, g2.T @ x2, g2.sum(axis=0)
