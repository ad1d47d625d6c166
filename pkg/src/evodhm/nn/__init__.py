"""Minimal numpy tensor kernels, layers, optimizer, and cost model."""

from .cost import CostReport, DenseSpec, cost_of, separable_counterparts, separable_reduction_ratio
from .kernels import (ConvSpec, bias_backward, conv2d_backward, conv2d_forward, fc_backward,
                      fc_forward, maxpool_backward, maxpool_forward, relu_backward, relu_forward,
                      tanh_backward, tanh_forward)
from .optim import AdamState, LearningRateSchedule, adam_step

__all__ = [
    "AdamState", "ConvSpec", "CostReport", "DenseSpec", "LearningRateSchedule", "adam_step",
    "bias_backward", "conv2d_backward", "conv2d_forward", "cost_of", "fc_backward", "fc_forward",
    "maxpool_backward", "maxpool_forward", "relu_backward", "relu_forward",
    "separable_counterparts", "separable_reduction_ratio", "tanh_backward", "tanh_forward",
]
