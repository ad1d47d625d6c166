"""Recurrent regressors used by the two alignment pipelines.

``VanillaRnnCell`` evolves a parameter vector::

    h_{t+1} = tanh(W_ih x_t + W_hh h_t)
    p_{t+1} = p_t + W_ho h_t          (h_{t+1} when use_next_hidden is set)

``FastRecurrentCell`` evolves a feature map with depthwise/pointwise convs::

    a       = D_i * F_t + D_h * (W_hh * h_t)
    F_{t+1} = F_t + tanh(a)
    h_{t+1} = tanh(a)

Weights are shared across steps. All arrays may carry a leading batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .nn import kernels
from .nn.cost import cost_of
from .nn.kernels import ConvSpec
from .nn.layers import Layer
from .nn.numerics import default_dtype


class VanillaRnnCell(Layer):
    """Weights ``w_ih`` (hidden x feature), ``w_hh`` (hidden x hidden),
    ``w_ho`` (output x hidden) and a learned initial hidden state ``h0``."""

    def __init__(self, feature_dim: int, hidden_dim: int, output_dim: int, rng=None,
                 use_next_hidden: bool = False, output_scale: float = 0.1):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = default_dtype()
        self.use_next_hidden = use_next_hidden
        b_ih = np.sqrt(3.0 / feature_dim)
        b_hh = 0.5 * np.sqrt(3.0 / hidden_dim)
        self.params["w_ih"] = rng.uniform(-b_ih, b_ih, (hidden_dim, feature_dim)).astype(dt)
        self.params["w_hh"] = rng.uniform(-b_hh, b_hh, (hidden_dim, hidden_dim)).astype(dt)
        self.params["w_ho"] = (output_scale * rng.uniform(-1, 1, (output_dim, hidden_dim))
                               / np.sqrt(hidden_dim)).astype(dt)
        self.params["h0"] = np.zeros(hidden_dim, dtype=dt)
        self.zero_grad()

    @property
    def hidden_dim(self) -> int:
        return self.params["w_hh"].shape[0]

    @property
    def feature_dim(self) -> int:
        return self.params["w_ih"].shape[1]

    @property
    def output_dim(self) -> int:
        return self.params["w_ho"].shape[0]

    def initial_hidden(self, batch: int | None = None) -> np.ndarray:
        h0 = self.params["h0"]
        return h0.copy() if batch is None else np.tile(h0, (batch, 1))

    def initial_hidden_backward(self, grad_h0):
        self.grads["h0"] += np.atleast_2d(grad_h0).sum(axis=0)


def vanilla_step(cell: VanillaRnnCell, features, h_t, p_t):
    """One update; returns ``(h_next, p_next, cache)``."""
    features, h_t, p_t = (np.asarray(a) for a in (features, h_t, p_t))
    if features.shape[-1] != cell.feature_dim or h_t.shape[-1] != cell.hidden_dim \
            or p_t.shape[-1] != cell.output_dim:
        raise ContractViolation(
            f"vanilla_step got feature/hidden/param sizes {features.shape[-1]}/{h_t.shape[-1]}/"
            f"{p_t.shape[-1]}, cell expects {cell.feature_dim}/{cell.hidden_dim}/{cell.output_dim}")
    p = cell.params
    h_next = kernels.tanh_forward(features @ p["w_ih"].T + h_t @ p["w_hh"].T)
    driver = h_next if cell.use_next_hidden else h_t
    p_next = p_t + driver @ p["w_ho"].T
    return h_next, p_next, (features, h_t, h_next)


def vanilla_step_backward(cell: VanillaRnnCell, cache, grad_h_next, grad_p_next):
    """Returns ``(grad_features, grad_h_t, grad_p_t)``; weight grads accumulate on the cell."""
    features, h_t, h_next = cache
    p, g = cell.params, cell.grads
    driver = h_next if cell.use_next_hidden else h_t
    g["w_ho"] += np.atleast_2d(grad_p_next).T @ np.atleast_2d(driver)
    grad_driver = grad_p_next @ p["w_ho"]
    if cell.use_next_hidden:
        grad_h_next = grad_h_next + grad_driver
    grad_a = kernels.tanh_backward(grad_h_next, h_next)
    g["w_ih"] += np.atleast_2d(grad_a).T @ np.atleast_2d(features)
    g["w_hh"] += np.atleast_2d(grad_a).T @ np.atleast_2d(h_t)
    grad_h = grad_a @ p["w_hh"]
    if not cell.use_next_hidden:
        grad_h = grad_h + grad_driver
    return grad_a @ p["w_ih"], grad_h, grad_p_next


class FastRecurrentCell(Layer):
    """Depthwise input branch ``d_in``, pointwise ``w_hh`` then depthwise ``d_hidden``
    on the hidden state, and a pointwise ``init`` producing h_0. No biases."""

    def __init__(self, channels: int, kernel_size: int = 3, rng=None, scale: float = 0.5):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        dt = default_dtype()
        c, k = channels, kernel_size
        self.dw_spec = ConvSpec(k, c, c, 1, None, "depthwise")
        self.pw_spec = ConvSpec(1, c, c, 1, 0, "pointwise")
        b_dw = scale * np.sqrt(3.0 / (k * k))
        b_pw = np.sqrt(3.0 / c)
        self.params["d_in"] = rng.uniform(-b_dw, b_dw, self.dw_spec.weight_shape).astype(dt)
        self.params["d_hidden"] = rng.uniform(-b_dw, b_dw, self.dw_spec.weight_shape).astype(dt)
        self.params["w_hh"] = rng.uniform(-b_pw, b_pw, self.pw_spec.weight_shape).astype(dt)
        self.params["init"] = rng.uniform(-b_pw, b_pw, self.pw_spec.weight_shape).astype(dt)
        self.zero_grad()

    @property
    def channels(self) -> int:
        return self.dw_spec.in_channels

    @property
    def kernel_size(self) -> int:
        return self.dw_spec.kernel_size

    def step_parameter_count(self) -> int:
        """Parameters of the recurrent update (two depthwise stacks + one pointwise)."""
        return 2 * cost_of(self.dw_spec).parameters + cost_of(self.pw_spec).parameters

    def costs(self, in_shape, steps: int = 1):
        hw = in_shape[:2]
        per_step = [(self.dw_spec, hw), (self.pw_spec, hw), (self.dw_spec, hw)]
        return [(self.pw_spec, hw)] + per_step * steps


def _check_map(cell, x, name):
    if np.shape(x)[-1] != cell.channels:
        raise ContractViolation(f"{name} has {np.shape(x)[-1]} channels, cell expects {cell.channels}")


def fast_recurrent_init(cell: FastRecurrentCell, features_cnn):
    """``(F_0, h_0)`` with ``h_0`` the pointwise projection of the CNN features."""
    _check_map(cell, features_cnn, "features_cnn")
    h0 = kernels.conv2d_forward(features_cnn, cell.pw_spec, cell.params["init"])
    return np.asarray(features_cnn), h0


def fast_recurrent_init_backward(cell, features_cnn, grad_f0, grad_h0):
    gx, gw = kernels.conv2d_backward(grad_h0, features_cnn, cell.pw_spec, cell.params["init"])
    cell.grads["init"] += gw
    return grad_f0 + gx


def fast_recurrent_step(cell: FastRecurrentCell, f_t, h_t):
    """One residual update; returns ``(F_next, h_next, cache)``."""
    _check_map(cell, f_t, "F_t")
    _check_map(cell, h_t, "h_t")
    if np.shape(f_t) != np.shape(h_t):
        raise ContractViolation(f"F_t {np.shape(f_t)} and h_t {np.shape(h_t)} differ in shape")
    p = cell.params
    mixed = kernels.conv2d_forward(h_t, cell.pw_spec, p["w_hh"])
    pre = (kernels.conv2d_forward(f_t, cell.dw_spec, p["d_in"])
           + kernels.conv2d_forward(mixed, cell.dw_spec, p["d_hidden"]))
    delta = kernels.tanh_forward(pre)
    return f_t + delta, delta, (f_t, h_t, mixed, delta)


def fast_recurrent_step_backward(cell: FastRecurrentCell, cache, grad_f_next, grad_h_next):
    """Returns ``(grad_F_t, grad_h_t)``; weight grads accumulate on the cell."""
    f_t, h_t, mixed, delta = cache
    p, g = cell.params, cell.grads
    grad_pre = kernels.tanh_backward(grad_f_next + grad_h_next, delta)
    gx_f, gw = kernels.conv2d_backward(grad_pre, f_t, cell.dw_spec, p["d_in"])
    g["d_in"] += gw
    gx_mixed, gw = kernels.conv2d_backward(grad_pre, mixed, cell.dw_spec, p["d_hidden"])
    g["d_hidden"] += gw
    gx_h, gw = kernels.conv2d_backward(gx_mixed, h_t, cell.pw_spec, p["w_hh"])
    g["w_hh"] += gw
    return grad_f_next + gx_f, gx_h


@dataclass
class Unrolled:
    """States after each step (index t-1 holds step t) plus caches for BPTT."""

    states: list
    caches: list


def unroll(cell, initial_state, steps: int, inputs=None) -> Unrolled:
    """Apply ``cell`` ``steps`` times with shared weights.

    ``initial_state`` is ``(F_0, h_0)`` for the fast cell and ``(h_0, p_0)``
    for the vanilla cell, which also needs ``inputs``: either a sequence of
    per-step feature vectors or a callable ``t, state -> features``.
    """
    if steps < 1:
        raise ContractViolation("unroll needs at least one step")
    states, caches = [], []
    a, b = initial_state
    for t in range(steps):
        if isinstance(cell, FastRecurrentCell):
            a, b, cache = fast_recurrent_step(cell, a, b)
        else:
            feats = inputs(t, (a, b)) if callable(inputs) else inputs[t]
            a, b, cache = vanilla_step(cell, feats, a, b)
        states.append((a, b))
        caches.append(cache)
    return Unrolled(states, caches)


def unroll_fast_backward(cell: FastRecurrentCell, run: Unrolled, grad_states):
    """BPTT through a fast-cell unroll.

    ``grad_states[t]`` is the gradient w.r.t. the F-state after step t+1
    (``None`` for none). Returns ``(grad_F_0, grad_h_0)``.
    """
    gf = np.zeros_like(run.states[-1][0])
    gh = np.zeros_like(run.states[-1][1])
    for t in reversed(range(len(run.caches))):
        if grad_states[t] is not None:
            gf = gf + grad_states[t]
        gf, gh = fast_recurrent_step_backward(cell, run.caches[t], gf, gh)
    return gf, gh


def standard_recurrent_parameter_count(channels: int, kernel_size: int) -> int:
    """A recurrent cell with two standard k x k convs in place of the factorized ones."""
    return 2 * kernel_size ** 2 * channels ** 2
