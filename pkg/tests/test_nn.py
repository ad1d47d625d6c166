from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evodhm.errors import ContractViolation, NumericError
from evodhm.nn import kernels, numerics
from evodhm.nn.cost import DenseSpec, cost_of, separable_counterparts, separable_reduction_ratio
from evodhm.nn.gradcheck import numerical_gradient, relative_error
from evodhm.nn.kernels import ConvSpec
from evodhm.nn.layers import Conv2D, Dense, Flatten, MaxPool, ReLU, Sequential, Tanh, collect_parameters
from evodhm.nn.optim import AdamState, LearningRateSchedule, adam_step, clip_by_global_norm
from evodhm.nn.reference import MacCounter, conv2d_reference, fc_reference


def random_spec(rng, mode=None, stride=None):
    mode = mode or rng.choice(["standard", "depthwise", "pointwise"])
    cin = int(rng.integers(1, 6))
    cout = cin if mode == "depthwise" else int(rng.integers(1, 6))
    k = 1 if mode == "pointwise" else int(rng.choice([1, 3, 5]))
    s = int(rng.integers(1, 3)) if stride is None else stride
    return ConvSpec(k, cin, cout, s, None, str(mode))


def rel_max(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300)


# --- forward oracles ---------------------------------------------------------


def test_identity_kernel_is_identity():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 7, 2))
    w = np.zeros((3, 3, 2, 2))
    w[1, 1] = np.eye(2)
    np.testing.assert_array_equal(kernels.conv2d_forward(x, ConvSpec(3, 2, 2), w), x)


def test_box_filter_hand_case():
    x = np.arange(9, dtype=float).reshape(3, 3, 1)
    out = kernels.conv2d_forward(x, ConvSpec(3, 1, 1), np.ones((3, 3, 1, 1)))[:, :, 0]
    np.testing.assert_array_equal(out, [[8, 15, 12], [21, 36, 27], [20, 33, 24]])


def test_depthwise_keeps_channels_separate():
    x = np.zeros((5, 5, 3))
    x[:, :, 1] = 1.0
    w = np.ones((3, 3, 3))
    out = kernels.conv2d_forward(x, ConvSpec(3, 3, 3, mode="depthwise"), w)
    assert out[:, :, 0].sum() == 0 and out[:, :, 2].sum() == 0
    assert out[2, 2, 1] == 9.0


@pytest.mark.parametrize("mode", ["standard", "depthwise", "pointwise"])
def test_matches_scalar_reference(mode):
    rng = np.random.default_rng({"standard": 1, "depthwise": 2, "pointwise": 3}[mode])
    for _ in range(70):
        spec = random_spec(rng, mode)
        h, w = rng.integers(spec.kernel_size, 9, 2)
        x = rng.standard_normal((h, w, spec.in_channels))
        wt = rng.standard_normal(spec.weight_shape)
        assert rel_max(kernels.conv2d_forward(x, spec, wt), conv2d_reference(x, spec, wt)) <= 1e-12


def test_batched_equals_per_sample():
    rng = np.random.default_rng(4)
    spec = ConvSpec(3, 3, 4, 2)
    x = rng.standard_normal((3, 8, 8, 3))
    wt = rng.standard_normal(spec.weight_shape)
    batched = kernels.conv2d_forward(x, spec, wt)
    for i in range(3):
        np.testing.assert_allclose(batched[i], kernels.conv2d_forward(x[i], spec, wt), rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_is_linear_in_input(seed, a, b):
    rng = np.random.default_rng(seed)
    spec = random_spec(rng)
    x, y = rng.standard_normal((2, 6, 6, spec.in_channels))
    wt = rng.standard_normal(spec.weight_shape)
    f = lambda v: kernels.conv2d_forward(v, spec, wt)
    np.testing.assert_allclose(f(a * x + b * y), a * f(x) + b * f(y), atol=1e-10)


def test_fc_matches_reference():
    rng = np.random.default_rng(5)
    w, b, x = rng.standard_normal((4, 7)), rng.standard_normal(4), rng.standard_normal(7)
    np.testing.assert_allclose(kernels.fc_forward(x, w, b), fc_reference(x, w, b), rtol=1e-13)


def test_shape_contracts():
    with pytest.raises(ContractViolation):
        ConvSpec(3, 2, 3, mode="depthwise")
    with pytest.raises(ContractViolation):
        ConvSpec(3, 2, 3, mode="pointwise")
    with pytest.raises(ContractViolation):
        ConvSpec(3, 2, 3, mode="dilated")
    with pytest.raises(ContractViolation):
        kernels.conv2d_forward(np.zeros((4, 4, 3)), ConvSpec(3, 2, 2), np.zeros((3, 3, 2, 2)))
    with pytest.raises(ContractViolation):
        kernels.conv2d_forward(np.zeros((4, 4, 2)), ConvSpec(3, 2, 2), np.zeros((3, 3, 2, 3)))
    with pytest.raises(ContractViolation):
        ConvSpec(5, 1, 1, padding=0).output_size(3, 3)


def test_strict_mode_rejects_non_finite():
    spec = ConvSpec(1, 1, 1, mode="pointwise")
    x = np.array([[[np.inf]]])
    with numerics.mode("test"):
        with pytest.raises(NumericError):
            kernels.conv2d_forward(x, spec, np.ones((1, 1, 1, 1)))
    with numerics.mode("fast"):
        assert np.isinf(kernels.conv2d_forward(x, spec, np.ones((1, 1, 1, 1)))).all()


# --- gradients ---------------------------------------------------------------


@pytest.mark.parametrize("mode", ["standard", "depthwise", "pointwise"])
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_gradients(mode, stride):
    rng = np.random.default_rng(10 + stride)
    spec = random_spec(rng, mode, stride)
    x = rng.standard_normal((2, 7, 6, spec.in_channels))
    wt = rng.standard_normal(spec.weight_shape)
    out_shape = kernels.conv2d_forward(x, spec, wt).shape
    g = rng.standard_normal(out_shape)
    gx, gw = kernels.conv2d_backward(g, x, spec, wt)
    loss = lambda: float(np.sum(g * kernels.conv2d_forward(x, spec, wt)))
    assert relative_error(gx, numerical_gradient(loss, x)) < 1e-7
    assert relative_error(gw, numerical_gradient(loss, wt)) < 1e-7


def test_elementwise_and_pool_gradients():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((2, 6, 6, 3))
    g = rng.standard_normal(x.shape)
    y = kernels.tanh_forward(x)
    assert relative_error(kernels.tanh_backward(g, y),
                          numerical_gradient(lambda: float(np.sum(g * kernels.tanh_forward(x))), x)) < 1e-7
    assert relative_error(kernels.relu_backward(g, x),
                          numerical_gradient(lambda: float(np.sum(g * kernels.relu_forward(x))), x)) < 1e-7
    gp = rng.standard_normal((2, 3, 3, 3))
    _, arg = kernels.maxpool_forward(x, 2)
    analytic = kernels.maxpool_backward(gp, arg, 2)
    numeric = numerical_gradient(lambda: float(np.sum(gp * kernels.maxpool_forward(x, 2)[0])), x)
    assert relative_error(analytic, numeric) < 1e-7


def test_fc_gradients():
    rng = np.random.default_rng(7)
    x, w, b = rng.standard_normal((3, 5)), rng.standard_normal((4, 5)), rng.standard_normal(4)
    g = rng.standard_normal((3, 4))
    gx, gw, gb = kernels.fc_backward(g, x, w)
    loss = lambda: float(np.sum(g * kernels.fc_forward(x, w, b)))
    assert relative_error(gx, numerical_gradient(loss, x)) < 1e-7
    assert relative_error(gw, numerical_gradient(loss, w)) < 1e-7
    assert relative_error(gb, numerical_gradient(loss, b)) < 1e-7


def test_sequential_gradients():
    rng = np.random.default_rng(8)
    net = Sequential([Conv2D(ConvSpec(3, 2, 3), rng), ReLU(), MaxPool(2),
                      Conv2D(ConvSpec(3, 3, 3, mode="depthwise"), rng), Tanh(),
                      Flatten(), Dense(27, 4, rng)])
    params, grads = collect_parameters(net.named_layers("net"))
    x = rng.standard_normal((2, 6, 6, 2))
    g = rng.standard_normal((2, 4))
    net.zero_grad()
    y, caches = net.forward(x)
    gx = net.backward(g, caches)

    def loss():
        return float(np.sum(g * net.forward(x)[0]))

    assert relative_error(gx, numerical_gradient(loss, x)) < 1e-6
    for name, p in params.items():
        assert relative_error(grads[name], numerical_gradient(loss, p)) < 1e-6, name


# --- cost model --------------------------------------------------------------


def test_cost_equals_counted_macs():
    rng = np.random.default_rng(9)
    for _ in range(50):
        spec = random_spec(rng, stride=1)
        h, w = (int(v) for v in rng.integers(1, 7, 2))
        counter = MacCounter()
        conv2d_reference(rng.standard_normal((h, w, spec.in_channels)), spec,
                         rng.standard_normal(spec.weight_shape), counter)
        assert cost_of(spec, (h, w)).mult_adds == counter.count


def test_strided_cost_uses_output_size():
    spec = ConvSpec(3, 4, 8, stride=2)
    counter = MacCounter()
    conv2d_reference(np.zeros((9, 9, 4)), spec, np.zeros(spec.weight_shape), counter)
    assert cost_of(spec, spec.output_size(9, 9)).mult_adds == counter.count == 25 * 9 * 32


@pytest.mark.parametrize("cout", [16, 64, 256])
def test_separable_ratio_closed_form(cout):
    spec = ConvSpec(3, 32, cout)
    assert separable_reduction_ratio(spec) == Fraction(1, cout) + Fraction(1, 9)
    dw, pw = separable_counterparts(spec)
    assert dw.mode == "depthwise" and pw.mode == "pointwise" and pw.out_channels == cout


def test_dense_cost_and_parameter_counts():
    assert cost_of(DenseSpec(1024, 136)) == cost_of(DenseSpec(136, 1024))
    assert cost_of(ConvSpec(3, 8, 16), 10).parameters == 3 * 3 * 8 * 16
    assert cost_of(ConvSpec(3, 8, 8, mode="depthwise"), 10).parameters == 72


# --- optimizer ---------------------------------------------------------------


def test_adam_first_steps_by_hand():
    p = {"w": np.array([1.0, -2.0])}
    g = {"w": np.array([0.5, -0.25])}
    state = AdamState()
    adam_step(p, g, state, lr=0.1)
    # bias-corrected first step moves each coordinate by lr * sign(g) (up to eps)
    np.testing.assert_allclose(p["w"], [0.9, -1.9], atol=1e-7)
    adam_step(p, g, state, lr=0.1)
    m = 0.1 * 0.5 * 0.9 + 0.1 * 0.5
    v = 0.001 * 0.25 * 0.999 + 0.001 * 0.25
    step = 0.1 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    first = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert p["w"][0] == pytest.approx(first - step, abs=1e-14)


def test_schedule_decay_and_reset():
    classic = LearningRateSchedule(0.001, 0.95, 2000)
    assert classic(1999, 0) == 0.001
    assert classic(2000, 0) == pytest.approx(0.00095)
    assert classic(4000, 3) == pytest.approx(0.001 * 0.95 ** 2)
    fast = LearningRateSchedule(0.005, reset_epoch=60, reset_lr=1e-5)
    assert fast(10_000, 59) == 0.005 and fast(10_001, 60) == 1e-5


def test_clip_by_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert clip_by_global_norm(g, 1.0) == 5.0
    assert np.hypot(g["a"][0], g["b"][0]) == pytest.approx(1.0)
    g = {"a": np.array([0.3])}
    clip_by_global_norm(g, None)
    assert g["a"][0] == 0.3
