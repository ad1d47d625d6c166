"""Linear 3D landmark shape model and weak-perspective camera.

Shapes are ``3 x L`` arrays (rows x, y, z). Basis columns are flattened
row-major from that layout, i.e. a column holds all x offsets, then all y
offsets, then all z offsets. Image axes: x to the right, y downwards.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

import numpy as np

from . import serialization
from .errors import ContractViolation, DataError

# Layout of the flattened parameter vector.
SCALE, PITCH, YAW, ROLL, TX, TY = range(6)
POSE_DIM = 6

_eval_lock = threading.Lock()
_eval_count = 0


def evaluation_count() -> int:
    """Number of :func:`synthesize_shape` calls made by this process."""
    return _eval_count


def _count_evaluation():
    global _eval_count
    with _eval_lock:
        _eval_count += 1


@dataclass(frozen=True)
class MorphableModel:
    mean_shape: np.ndarray
    id_basis: np.ndarray
    exp_basis: np.ndarray

    def __post_init__(self):
        mean = np.array(self.mean_shape, dtype=np.float64)
        id_b = np.array(self.id_basis, dtype=np.float64)
        exp_b = np.array(self.exp_basis, dtype=np.float64)
        if mean.ndim != 2 or mean.shape[0] != 3:
            raise ContractViolation(f"mean_shape must be 3 x L, got {mean.shape}")
        if not np.all(np.isfinite(mean)):
            raise ContractViolation("mean_shape has non-finite entries")
        L = mean.shape[1]
        for name, basis in (("id_basis", id_b), ("exp_basis", exp_b)):
            if basis.ndim != 2 or basis.shape[0] != 3 * L:
                raise ContractViolation(f"{name} must have {3 * L} rows, got {basis.shape}")
            if basis.shape[1] < 1:
                raise ContractViolation(f"{name} needs at least one column")
            if not np.all(np.isfinite(basis)):
                raise ContractViolation(f"{name} has non-finite entries")
        cols = np.concatenate([id_b, exp_b], axis=1)
        # an empty model (L = 0) is allowed; it renders an empty heat map
        if L and np.any(np.all(cols == 0, axis=0)):
            raise ContractViolation("basis columns must be non-zero")
        if L and len({c.tobytes() for c in cols.T}) != cols.shape[1]:
            raise ContractViolation("basis columns must be mutually distinct")
        for arr in (mean, id_b, exp_b):
            arr.setflags(write=False)
        object.__setattr__(self, "mean_shape", mean)
        object.__setattr__(self, "id_basis", id_b)
        object.__setattr__(self, "exp_basis", exp_b)

    @property
    def landmark_count(self) -> int:
        return self.mean_shape.shape[1]

    @property
    def k_id(self) -> int:
        return self.id_basis.shape[1]

    @property
    def k_exp(self) -> int:
        return self.exp_basis.shape[1]

    @property
    def param_dim(self) -> int:
        return POSE_DIM + self.k_id + self.k_exp

    def arrays(self) -> dict[str, np.ndarray]:
        return {"mean_shape": self.mean_shape, "id_basis": self.id_basis, "exp_basis": self.exp_basis}


@dataclass(frozen=True)
class PoseShapeParams:
    scale_f: float
    euler: tuple[float, float, float]
    translation_2d: tuple[float, float]
    p_id: np.ndarray = field(default_factory=lambda: np.zeros(0))
    p_exp: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        object.__setattr__(self, "euler", tuple(float(a) for a in self.euler))
        object.__setattr__(self, "translation_2d", tuple(float(a) for a in self.translation_2d))
        object.__setattr__(self, "p_id", np.array(self.p_id, dtype=np.float64).ravel())
        object.__setattr__(self, "p_exp", np.array(self.p_exp, dtype=np.float64).ravel())
        if len(self.euler) != 3 or len(self.translation_2d) != 2:
            raise ContractViolation("euler needs 3 angles and translation_2d 2 values")

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.scale_f], self.euler, self.translation_2d, self.p_id, self.p_exp])

    @classmethod
    def from_vector(cls, vec, k_id: int, k_exp: int) -> "PoseShapeParams":
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.size != POSE_DIM + k_id + k_exp:
            raise ContractViolation(
                f"parameter vector has length {vec.size}, expected {POSE_DIM + k_id + k_exp}")
        return cls(vec[SCALE], tuple(vec[PITCH:ROLL + 1]), tuple(vec[TX:TY + 1]),
                   vec[POSE_DIM:POSE_DIM + k_id], vec[POSE_DIM + k_id:])

    @classmethod
    def neutral(cls, model: MorphableModel, scale_f: float, center=(0.0, 0.0)) -> "PoseShapeParams":
        """Frontal pose with zero shape/expression coefficients."""
        return cls(scale_f, (0.0, 0.0, 0.0), center, np.zeros(model.k_id), np.zeros(model.k_exp))


def _check_dims(model, params):
    if params.p_id.size != model.k_id or params.p_exp.size != model.k_exp:
        raise ContractViolation(
            f"coefficient lengths ({params.p_id.size}, {params.p_exp.size}) do not match "
            f"basis columns ({model.k_id}, {model.k_exp})")


def synthesize_shape(model: MorphableModel, params: PoseShapeParams) -> np.ndarray:
    """Mean shape plus identity and expression deformations, as a 3 x L array."""
    _check_dims(model, params)
    _count_evaluation()
    offset = model.id_basis @ params.p_id + model.exp_basis @ params.p_exp
    return model.mean_shape + offset.reshape(3, model.landmark_count)


def _axis_rotations(euler):
    pitch, yaw, roll = euler
    cx, sx = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    cz, sz = np.cos(roll), np.sin(roll)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    drx = np.array([[0.0, 0.0, 0.0], [0.0, -sx, -cx], [0.0, cx, -sx]])
    dry = np.array([[-sy, 0.0, cy], [0.0, 0.0, 0.0], [-cy, 0.0, -sy]])
    drz = np.array([[-sz, -cz, 0.0], [cz, -sz, 0.0], [0.0, 0.0, 0.0]])
    return (rx, ry, rz), (drx, dry, drz)


def rotation_from_euler(euler) -> np.ndarray:
    """R = Rz(roll) @ Ry(yaw) @ Rx(pitch), angles in radians."""
    (rx, ry, rz), _ = _axis_rotations(euler)
    return rz @ ry @ rx


def rotation_derivatives(euler) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """dR/dpitch, dR/dyaw, dR/droll for :func:`rotation_from_euler`."""
    (rx, ry, rz), (drx, dry, drz) = _axis_rotations(euler)
    return rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx


def posed_shape(model: MorphableModel, params: PoseShapeParams) -> np.ndarray:
    """Scaled, rotated, translated 3D shape (3 x L); rows 0-1 are the projection."""
    if not params.scale_f > 0:
        raise ContractViolation(f"scale_f must be positive, got {params.scale_f}")
    shape = synthesize_shape(model, params)
    out = params.scale_f * (rotation_from_euler(params.euler) @ shape)
    out[0] += params.translation_2d[0]
    out[1] += params.translation_2d[1]
    return out


def project_weak_perspective(model: MorphableModel, params: PoseShapeParams) -> np.ndarray:
    """f * M * R * S + t_2d as a 2 x L array of pixel coordinates."""
    return posed_shape(model, params)[:2]


def posed_shape_vjp(model: MorphableModel, params: PoseShapeParams, grad: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. :func:`posed_shape` back to the flat parameter vector.

    ``grad`` may be 3 x L or 2 x L (the latter means the projection only).
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape[0] == 2:
        grad = np.vstack([grad, np.zeros((1, grad.shape[1]))])
    shape = synthesize_shape(model, params)
    rot = rotation_from_euler(params.euler)
    f = params.scale_f
    out = np.empty(model.param_dim)
    out[SCALE] = np.sum(grad * (rot @ shape))
    for idx, d_rot in zip((PITCH, YAW, ROLL), rotation_derivatives(params.euler)):
        out[idx] = f * np.sum(grad * (d_rot @ shape))
    out[TX] = grad[0].sum()
    out[TY] = grad[1].sum()
    d_shape = (f * rot.T @ grad).ravel()
    out[POSE_DIM:POSE_DIM + model.k_id] = model.id_basis.T @ d_shape
    out[POSE_DIM + model.k_id:] = model.exp_basis.T @ d_shape
    return out


# ---------------------------------------------------------------------------
# synthetic model


def _face68() -> np.ndarray:
    """Rough 68-point frontal face layout (x right, y down, z towards camera)."""
    pts = []
    a = np.linspace(0.0, np.pi, 17)
    pts += list(zip(-0.46 * np.cos(a), -0.08 + 0.58 * np.sin(a)))       # jaw
    for side in (-1, 1):                                                # brows
        xs = np.linspace(0.40, 0.08, 5) * side
        if side > 0:
            xs = xs[::-1]
        pts += [(x, -0.27 - 0.05 * np.sin(np.pi * (abs(x) - 0.08) / 0.32)) for x in xs]
    pts += [(0.0, y) for y in np.linspace(-0.17, 0.05, 4)]              # nose bridge
    pts += [(x, 0.11 - 0.02 * (1 - abs(x) / 0.1)) for x in np.linspace(-0.1, 0.1, 5)]
    for cx in (-0.2, 0.2):                                              # eyes
        t = np.linspace(np.pi, -np.pi, 7)[:-1]
        pts += list(zip(cx + 0.08 * np.cos(t), -0.13 - 0.035 * np.sin(t)))
    t = np.linspace(np.pi, -np.pi, 13)[:-1]                             # outer lip
    pts += list(zip(0.19 * np.cos(t), 0.3 - 0.07 * np.sin(t)))
    t = np.linspace(np.pi, -np.pi, 9)[:-1]                              # inner lip
    pts += list(zip(0.12 * np.cos(t), 0.3 - 0.03 * np.sin(t)))
    xy = np.array(pts).T
    ell = 1.0 - (xy[0] / 0.56) ** 2 - ((xy[1] - 0.06) / 0.75) ** 2
    z = 0.38 * np.sqrt(np.clip(ell, 0.0, None))
    z[27:31] += np.linspace(0.05, 0.16, 4)
    z[31:36] += 0.09
    return np.vstack([xy, z])


def _ellipsoid_points(L: int) -> np.ndarray:
    """Fibonacci spiral on the front half of an ellipsoid."""
    i = np.arange(L) + 0.5
    z = 1.0 - i / L                      # (0, 1]: front hemisphere only
    r = np.sqrt(1.0 - z * z)
    theta = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.vstack([0.42 * r * np.cos(theta), 0.52 * r * np.sin(theta), 0.3 * z])


def _normalize_cube(shape: np.ndarray) -> np.ndarray:
    lo, hi = shape.min(axis=1, keepdims=True), shape.max(axis=1, keepdims=True)
    return (shape - (lo + hi) / 2) / float(np.max(hi - lo))


def _smooth_fields(rng, mean: np.ndarray, k: int, amplitude: float) -> np.ndarray:
    x, y, z = mean
    feats = np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, y * z, x * z], axis=1)
    cols = np.empty((3 * mean.shape[1], k))
    for j in range(k):
        coef = rng.standard_normal((feats.shape[1], 3))
        disp = feats @ coef                          # L x 3
        disp -= disp.mean(axis=0)
        disp /= np.sqrt(np.mean(disp ** 2)) + 1e-12
        cols[:, j] = (amplitude / (1.0 + j) * disp.T).ravel()
    return cols


def generate_synthetic_model(seed: int, L: int = 68, K_id: int = 8, K_exp: int = 4) -> MorphableModel:
    """Deterministic stand-in for a real face model.

    The mean shape fits a unit bounding cube. Basis columns are smooth
    polynomial deformation fields whose RMS magnitude falls off as 1/(1+j).
    """
    if L < 4 or K_id < 1 or K_exp < 1:
        raise ContractViolation("need L >= 4, K_id >= 1, K_exp >= 1")
    rng = np.random.default_rng(seed)
    mean = _face68() if L == 68 else _ellipsoid_points(L)
    mean = _normalize_cube(mean)
    id_basis = _smooth_fields(rng, mean, K_id, 0.04)
    exp_basis = _smooth_fields(rng, mean, K_exp, 0.025)
    return MorphableModel(mean, id_basis, exp_basis)


# ---------------------------------------------------------------------------
# persistence


def save_model(model: MorphableModel, path) -> int:
    return serialization.save(path, model.arrays(), {"kind": "morphable_model"})


def load_model(path) -> MorphableModel:
    arrays, meta = serialization.load(path)
    return model_from_arrays(arrays, meta)


def model_from_arrays(arrays, meta=None, prefix="") -> MorphableModel:
    try:
        return MorphableModel(arrays[prefix + "mean_shape"], arrays[prefix + "id_basis"],
                              arrays[prefix + "exp_basis"])
    except KeyError as exc:
        raise DataError(f"missing morphable model chunk {exc}") from exc


def model_to_json(model: MorphableModel) -> str:
    return serialization.to_json(model.arrays(), {"kind": "morphable_model"})


def model_from_json(text: str) -> MorphableModel:
    arrays, meta = serialization.from_json(text)
    return model_from_arrays(arrays, meta)


def params_to_json(params: PoseShapeParams) -> str:
    return json.dumps({"scale_f": params.scale_f, "euler": list(params.euler),
                       "translation_2d": list(params.translation_2d),
                       "p_id": params.p_id.tolist(), "p_exp": params.p_exp.tolist()})
