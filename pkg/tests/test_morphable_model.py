import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evodhm import morphable_model as mm
from evodhm.errors import ContractViolation
from evodhm.morphable_model import MorphableModel, PoseShapeParams
from evodhm.nn.gradcheck import numerical_gradient, relative_error


@pytest.fixture(scope="module")
def model():
    return mm.generate_synthetic_model(3, L=20, K_id=5, K_exp=3)


def random_params(model, rng, f=None):
    return PoseShapeParams(
        f if f is not None else rng.uniform(10, 40),
        tuple(rng.uniform(-1.2, 1.2, 3)),
        tuple(rng.uniform(-5, 40, 2)),
        rng.standard_normal(model.k_id),
        rng.standard_normal(model.k_exp),
    )


def loop_synthesize(model, params):
    L = model.landmark_count
    out = np.zeros((3, L))
    for axis in range(3):
        for k in range(L):
            row = axis * L + k
            acc = model.mean_shape[axis, k]
            for j in range(model.k_id):
                acc += model.id_basis[row, j] * params.p_id[j]
            for j in range(model.k_exp):
                acc += model.exp_basis[row, j] * params.p_exp[j]
            out[axis, k] = acc
    return out


def loop_project(model, params):
    shape = loop_synthesize(model, params)
    pitch, yaw, roll = params.euler
    # composed by hand: Rz(roll) Ry(yaw) Rx(pitch)
    cx, sx, cy, sy, cz, sz = (math.cos(pitch), math.sin(pitch), math.cos(yaw), math.sin(yaw),
                              math.cos(roll), math.sin(roll))
    r = [[cz * cy, cz * sy * sx - sz * cx, cz * sy * cx + sz * sx],
         [sz * cy, sz * sy * sx + cz * cx, sz * sy * cx - cz * sx]]
    out = np.zeros((2, model.landmark_count))
    for k in range(model.landmark_count):
        for i in range(2):
            acc = 0.0
            for j in range(3):
                acc += r[i][j] * shape[j, k]
            out[i, k] = params.scale_f * acc + params.translation_2d[i]
    return out


def test_zero_coefficients_give_mean(model):
    p = PoseShapeParams.neutral(model, 1.0)
    np.testing.assert_array_equal(mm.synthesize_shape(model, p), model.mean_shape)


def test_identity_basis_shifts_first_coordinate():
    L = 4
    mean = np.arange(12, dtype=float).reshape(3, L)
    id_basis = np.eye(3 * L)[:, :2]
    exp_basis = np.eye(3 * L)[:, 5:6]
    model = MorphableModel(mean, id_basis, exp_basis)
    alpha = 2.5
    shape = mm.synthesize_shape(model, PoseShapeParams(1.0, (0, 0, 0), (0, 0), [alpha, 0.0], [0.0]))
    expected = mean.copy()
    expected[0, 0] += alpha
    np.testing.assert_array_equal(shape, expected)


def test_synthesize_matches_loop_oracle(model):
    rng = np.random.default_rng(11)
    for _ in range(5):
        p = random_params(model, rng)
        got = mm.synthesize_shape(model, p)
        want = loop_synthesize(model, p)
        assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))


def test_dimension_mismatch_raises(model):
    p = PoseShapeParams(1.0, (0, 0, 0), (0, 0), np.zeros(model.k_id + 1), np.zeros(model.k_exp))
    with pytest.raises(ContractViolation):
        mm.synthesize_shape(model, p)


def test_rotation_identity_and_yaw_quarter_turn():
    np.testing.assert_array_equal(mm.rotation_from_euler((0, 0, 0)), np.eye(3))
    r = mm.rotation_from_euler((0.0, math.pi / 2, 0.0))
    np.testing.assert_allclose(r @ np.array([1.0, 0.0, 0.0]), [0.0, 0.0, -1.0], atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.tuples(*[st.floats(-10, 10, allow_nan=False)] * 3))
def test_rotation_is_proper_orthonormal(euler):
    r = mm.rotation_from_euler(euler)
    assert np.max(np.abs(r.T @ r - np.eye(3))) < 1e-12
    assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_rotation_derivatives_match_finite_differences():
    euler = np.array([0.3, -0.7, 1.1])
    for axis, d in enumerate(mm.rotation_derivatives(euler)):
        e = 1e-6
        hi, lo = euler.copy(), euler.copy()
        hi[axis] += e
        lo[axis] -= e
        fd = (mm.rotation_from_euler(hi) - mm.rotation_from_euler(lo)) / (2 * e)
        np.testing.assert_allclose(d, fd, atol=1e-9)


def test_identity_pose_projection_is_first_two_rows(model):
    rng = np.random.default_rng(2)
    p = random_params(model, rng)
    p = PoseShapeParams(1.0, (0, 0, 0), (0, 0), p.p_id, p.p_exp)
    np.testing.assert_array_equal(mm.project_weak_perspective(model, p), mm.synthesize_shape(model, p)[:2])


def test_projection_doubles_with_scale(model):
    p1 = PoseShapeParams.neutral(model, 1.0)
    p2 = PoseShapeParams.neutral(model, 2.0)
    np.testing.assert_array_equal(mm.project_weak_perspective(model, p2),
                                  2.0 * mm.project_weak_perspective(model, p1))


def test_projection_matches_loop_oracle(model):
    rng = np.random.default_rng(5)
    for _ in range(5):
        p = random_params(model, rng)
        got = mm.project_weak_perspective(model, p)
        want = loop_project(model, p)
        assert np.max(np.abs(got - want)) <= 1e-12 * np.max(np.abs(want))


def test_nonpositive_scale_rejected(model):
    with pytest.raises(ContractViolation):
        mm.project_weak_perspective(model, PoseShapeParams.neutral(model, 0.0))


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_coefficient_affinity(a, b, seed):
    model = mm.generate_synthetic_model(3, L=20, K_id=5, K_exp=3)
    rng = np.random.default_rng(seed)
    p, q = random_params(model, rng), random_params(model, rng)
    combo = PoseShapeParams(1.0, (0, 0, 0), (0, 0), a * p.p_id + b * q.p_id, a * p.p_exp + b * q.p_exp)
    lhs = mm.synthesize_shape(model, combo)
    rhs = a * mm.synthesize_shape(model, p) + b * mm.synthesize_shape(model, q) - (a + b - 1) * model.mean_shape
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.01, 50), st.integers(0, 2**32 - 1))
def test_projection_scale_law(k, seed):
    model = mm.generate_synthetic_model(3, L=20, K_id=5, K_exp=3)
    p = random_params(model, np.random.default_rng(seed))
    pk = PoseShapeParams(p.scale_f * k, p.euler, p.translation_2d, p.p_id, p.p_exp)
    t = np.array(p.translation_2d)[:, None]
    np.testing.assert_allclose(mm.project_weak_perspective(model, pk),
                               k * (mm.project_weak_perspective(model, p) - t) + t, rtol=1e-12, atol=1e-9)


def test_generator_is_deterministic_and_sized():
    a = mm.generate_synthetic_model(1, 68, 8, 4)
    b = mm.generate_synthetic_model(1, 68, 8, 4)
    for name in ("mean_shape", "id_basis", "exp_basis"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    assert a.param_dim == 18
    assert mm.generate_synthetic_model(1, 68, 199, 29).param_dim == 234


def test_generated_mean_fits_unit_cube():
    m = mm.generate_synthetic_model(4, 68, 8, 4)
    assert np.max(np.ptp(m.mean_shape, axis=1)) == pytest.approx(1.0)
    assert np.ptp(m.mean_shape[2]) > 0.1


def test_generator_rejects_tiny_sizes():
    with pytest.raises(ContractViolation):
        mm.generate_synthetic_model(1, 3, 1, 1)


def test_invalid_model_rejected():
    with pytest.raises(ContractViolation):
        MorphableModel(np.zeros((3, 4)), np.zeros((12, 1)), np.ones((12, 1)))
    with pytest.raises(ContractViolation):
        MorphableModel(np.zeros((3, 4)), np.ones((12, 2)), np.ones((12, 1)))
    with pytest.raises(ContractViolation):
        MorphableModel(np.zeros((3, 4)), np.ones((11, 1)), np.ones((12, 1)))


def test_param_vector_roundtrip(model):
    p = random_params(model, np.random.default_rng(0))
    q = PoseShapeParams.from_vector(p.to_vector(), model.k_id, model.k_exp)
    np.testing.assert_array_equal(q.to_vector(), p.to_vector())
    with pytest.raises(ContractViolation):
        PoseShapeParams.from_vector(np.zeros(3), model.k_id, model.k_exp)


def test_posed_vjp_matches_finite_differences(model):
    rng = np.random.default_rng(9)
    p = random_params(model, rng)
    weights = rng.standard_normal((3, model.landmark_count))
    vec = p.to_vector()

    def loss():
        return float(np.sum(weights * mm.posed_shape(model, PoseShapeParams.from_vector(vec, model.k_id, model.k_exp))))

    analytic = mm.posed_shape_vjp(model, p, weights)
    assert relative_error(analytic, numerical_gradient(loss, vec)) < 1e-7


def test_binary_and_json_roundtrip(model, tmp_path):
    path = tmp_path / "m.evam"
    mm.save_model(model, path)
    assert path.read_bytes()[:4] == b"EVAM"
    back = mm.load_model(path)
    for name in ("mean_shape", "id_basis", "exp_basis"):
        np.testing.assert_array_equal(getattr(back, name), getattr(model, name))
    back = mm.model_from_json(mm.model_to_json(model))
    np.testing.assert_array_equal(back.id_basis, model.id_basis)
