"""Small layer objects built on the kernels.

Layers are functional about activations: ``forward`` returns ``(y, cache)``
and ``backward(grad, cache)`` returns the input gradient while adding
parameter gradients into ``layer.grads``. Keeping the cache outside the
layer lets one layer be applied several times per pass (weight sharing in
the recurrent cells).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .cost import CostReport, DenseSpec, cost_of
from .kernels import ConvSpec
from .numerics import default_dtype


class Layer:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def zero_grad(self):
        for name, p in self.params.items():
            if name in self.grads:
                self.grads[name].fill(0)
            else:
                self.grads[name] = np.zeros_like(p)

    def output_shape(self, shape):
        return shape

    def costs(self, in_shape) -> list[tuple[object, object]]:
        """``(spec, output feature size)`` pairs for the cost model; empty for free ops."""
        return []


class Conv2D(Layer):
    def __init__(self, spec: ConvSpec, rng: np.random.Generator | None = None, bias: bool = True):
        super().__init__()
        self.spec = spec
        fan_in = spec.kernel_size ** 2 * (1 if spec.mode == "depthwise" else spec.in_channels)
        bound = np.sqrt(6.0 / fan_in)
        rng = rng if rng is not None else np.random.default_rng(0)
        dtype = default_dtype()
        self.params["weight"] = rng.uniform(-bound, bound, spec.weight_shape).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(spec.out_channels, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        return kernels.conv2d_forward(x, self.spec, self.params["weight"], self.params.get("bias")), x

    def backward(self, grad, x):
        gx, gw = kernels.conv2d_backward(grad, x, self.spec, self.params["weight"])
        self.grads["weight"] += gw
        if "bias" in self.params:
            self.grads["bias"] += kernels.bias_backward(grad)
        return gx

    def output_shape(self, shape):
        h, w, _ = shape
        return (*self.spec.output_size(h, w), self.spec.out_channels)

    def costs(self, in_shape):
        return [(self.spec, self.output_shape(in_shape)[:2])]


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng=None, bias: bool = True, scale: float = 1.0):
        super().__init__()
        self.spec = DenseSpec(in_features, out_features)
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = scale * np.sqrt(6.0 / in_features)
        dtype = default_dtype()
        self.params["weight"] = rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()

    def forward(self, x):
        return kernels.fc_forward(x, self.params["weight"], self.params.get("bias")), x

    def backward(self, grad, x):
        gx, gw, gb = kernels.fc_backward(grad, x, self.params["weight"])
        self.grads["weight"] += gw
        if "bias" in self.params:
            self.grads["bias"] += gb
        return gx

    def output_shape(self, shape):
        return (self.spec.out_features,)

    def costs(self, in_shape):
        return [(self.spec, 1)]


class ReLU(Layer):
    def forward(self, x):
        return kernels.relu_forward(x), x

    def backward(self, grad, x):
        return kernels.relu_backward(grad, x)


class Tanh(Layer):
    def forward(self, x):
        y = kernels.tanh_forward(x)
        return y, y

    def backward(self, grad, y):
        return kernels.tanh_backward(grad, y)


class MaxPool(Layer):
    def __init__(self, size: int = 2):
        super().__init__()
        self.size = size

    def forward(self, x):
        return kernels.maxpool_forward(x, self.size)

    def backward(self, grad, argmax):
        return kernels.maxpool_backward(grad, argmax, self.size)

    def output_shape(self, shape):
        h, w, c = shape
        return (h // self.size, w // self.size, c)


class Flatten(Layer):
    """(N, H, W, C) -> (N, H*W*C); row-major so spatial order is preserved."""

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad, shape):
        return grad.reshape(shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers

    def forward(self, x):
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        return x, caches

    def backward(self, grad, caches):
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            grad = layer.backward(grad, cache)
        return grad

    def named_layers(self, prefix: str):
        return [(f"{prefix}.{i}", layer) for i, layer in enumerate(self.layers)]

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def output_shape(self, shape):
        for layer in self.layers:
            shape = layer.output_shape(shape)
        return shape

    def costs(self, in_shape):
        out = []
        for layer in self.layers:
            out += layer.costs(in_shape)
            in_shape = layer.output_shape(in_shape)
        return out

    def total_cost(self, in_shape) -> CostReport:
        total = CostReport(0, 0)
        for spec, size in self.costs(in_shape):
            total = total + cost_of(spec, size)
        return total


def collect_parameters(named_layers) -> tuple[dict, dict]:
    """Flat ``{"prefix.param": array}`` views of params and grads (shared arrays, no copies)."""
    params, grads = {}, {}
    for prefix, layer in named_layers:
        if isinstance(layer, Sequential):
            sub_params, sub_grads = collect_parameters(layer.named_layers(prefix))
            params.update(sub_params)
            grads.update(sub_grads)
            continue
        for name in layer.params:
            params[f"{prefix}.{name}"] = layer.params[name]
            grads[f"{prefix}.{name}"] = layer.grads[name]
    return params, grads
