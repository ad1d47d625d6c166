"""Scalar-loop reference convolution with a multiply-accumulate counter.

Slow on purpose: every kernel tap, padded or not, is one counted MAC. Used
as the oracle for the vectorized kernels and for the cost model.
"""

from __future__ import annotations

import numpy as np

from .kernels import ConvSpec


class MacCounter:
    def __init__(self):
        self.count = 0


def conv2d_reference(x, spec: ConvSpec, weights, counter: MacCounter | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    h, w, cin = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.pad
    ho, wo = spec.output_size(h, w)
    xp = np.zeros((h + 2 * p, w + 2 * p, cin))
    xp[p:p + h, p:p + w] = x
    out = np.zeros((ho, wo, spec.out_channels))
    macs = 0
    for oy in range(ho):
        for ox in range(wo):
            for co in range(spec.out_channels):
                acc = 0.0
                for ky in range(k):
                    for kx in range(k):
                        if spec.mode == "depthwise":
                            acc += xp[oy * s + ky, ox * s + kx, co] * weights[ky, kx, co]
                            macs += 1
                        else:
                            for ci in range(cin):
                                acc += xp[oy * s + ky, ox * s + kx, ci] * weights[ky, kx, ci, co]
                                macs += 1
                out[oy, ox, co] = acc
    if counter is not None:
        counter.count += macs
    return out


def fc_reference(x, weights, bias=None) -> np.ndarray:
    out_dim, in_dim = weights.shape
    y = np.zeros(out_dim)
    for o in range(out_dim):
        acc = 0.0 if bias is None else float(bias[o])
        for i in range(in_dim):
            acc += weights[o, i] * x[i]
        y[o] = acc
    return y
