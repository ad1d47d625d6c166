"""Analytic multiply-accumulate and parameter counts.

For a stride-1 "same" layer with feature size S_F, kernel S_k:

* standard:  S_F^2 * S_k^2 * C_in * C_out MACs, S_k^2 * C_in * C_out params
* depthwise: S_F^2 * S_k^2 * C_out MACs,        S_k^2 * C_out params
* pointwise: S_F^2 * C_in * C_out MACs,         C_in * C_out params

Strided layers use their output size in place of S_F. Bias terms are
never counted. "Cost" here is multiply-accumulates, not FLOPs.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

from ..errors import ContractViolation
from .kernels import ConvSpec


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class CostReport:
    mult_adds: int
    parameters: int

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(self.mult_adds + other.mult_adds, self.parameters + other.parameters)


ZERO = CostReport(0, 0)


def _hw(feature_size):
    if isinstance(feature_size, int):
        return feature_size, feature_size
    h, w = feature_size
    return int(h), int(w)


def cost_of(spec, feature_size=1) -> CostReport:
    """Cost of one layer; ``feature_size`` is the output spatial size (int or (h, w))."""
    if isinstance(spec, DenseSpec):
        n = spec.in_features * spec.out_features
        return CostReport(n, n)
    if not isinstance(spec, ConvSpec):
        raise ContractViolation(f"no cost model for {type(spec).__name__}")
    h, w = _hw(feature_size)
    k2 = spec.kernel_size ** 2
    if spec.mode == "depthwise":
        params = k2 * spec.out_channels
    elif spec.mode == "pointwise":
        params = spec.in_channels * spec.out_channels
    else:
        params = k2 * spec.in_channels * spec.out_channels
    return CostReport(h * w * params, params)


def separable_counterparts(spec: ConvSpec) -> tuple[ConvSpec, ConvSpec]:
    """Depthwise + pointwise pair that factorizes a standard convolution."""
    if spec.mode != "standard":
        raise ContractViolation("separable counterparts are defined for standard convs")
    dw = ConvSpec(spec.kernel_size, spec.in_channels, spec.in_channels, spec.stride, spec.padding, "depthwise")
    pw = ConvSpec(1, spec.in_channels, spec.out_channels, 1, 0, "pointwise")
    return dw, pw


def separable_reduction_ratio(spec: ConvSpec) -> Fraction:
    """(depthwise + pointwise) / standard MACs; always 1/C_out + 1/S_k^2."""
    dw, pw = separable_counterparts(spec)
    std = cost_of(spec, 1).mult_adds
    return Fraction(cost_of(dw, 1).mult_adds + cost_of(pw, 1).mult_adds, std)


def report_record(layer: str, spec, feature_size) -> dict:
    mode = spec.mode if isinstance(spec, ConvSpec) else "dense"
    return {"layer": layer, "mode": mode, **asdict(cost_of(spec, feature_size))}
