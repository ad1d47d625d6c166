"""Synthetic face-proxy dataset and its on-disk layout.

Directory layout::

    meta.json        config echo, seed, count, per-sample yaw, yaw-bin counts
    img0000.ppm      8-bit RGB image
    lm0000.txt       one "x y z" line per landmark, pixels, LF endings
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, DataError
from ..imageio import read_ppm, to_uint8, write_ppm
from ..morphable_model import MorphableModel, PoseShapeParams, posed_shape
from .config import PipelineConfig

YAW_LIMIT_DEG = 89.0
YAW_BINS_DEG = (0.0, 30.0, 60.0, 90.0)
SCHEMA_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray            # N x H x W x 3, floats in [0, 1]
    landmarks: np.ndarray         # N x 3 x L, posed shape (x, y in pixels)
    yaw_deg: np.ndarray | None = None
    params: list = field(default_factory=list)

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def landmarks_2d(self) -> np.ndarray:
        return self.landmarks[:, :2]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.intp)
        return Dataset(self.images[idx], self.landmarks[idx],
                       None if self.yaw_deg is None else self.yaw_deg[idx],
                       [self.params[i] for i in idx] if self.params else [])


def yaw_bin_counts(yaw_deg) -> list[int]:
    a = np.abs(np.asarray(yaw_deg, dtype=float))
    return [int(np.sum(a < 30.0)), int(np.sum((a >= 30.0) & (a < 60.0))), int(np.sum(a >= 60.0))]


def sample_params(model: MorphableModel, rng: np.random.Generator, config: PipelineConfig) -> PoseShapeParams:
    size = config.image_size
    f = config.face_fill * size * rng.uniform(0.9, 1.1)
    yaw = np.deg2rad(rng.uniform(-YAW_LIMIT_DEG, YAW_LIMIT_DEG))
    pitch = np.deg2rad(rng.uniform(-20.0, 20.0))
    roll = np.deg2rad(rng.uniform(-20.0, 20.0))
    p_id = rng.standard_normal(model.k_id)
    p_exp = rng.standard_normal(model.k_exp)
    shift = rng.uniform(-0.05, 0.05, 2) * size
    probe = PoseShapeParams(f, (pitch, yaw, roll), (0.0, 0.0), p_id, p_exp)
    centroid = posed_shape(model, probe)[:2].mean(axis=1)
    center = (size - 1) / 2.0
    t = (center - centroid[0] + shift[0], center - centroid[1] + shift[1])
    return PoseShapeParams(f, (pitch, yaw, roll), t, p_id, p_exp)


def _background(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.full((size, size, 3), 0.35)
    for _ in range(4):
        freq = rng.uniform(0.5, 4.0, 2)
        phase = rng.uniform(0, 2 * np.pi)
        tint = rng.uniform(-0.08, 0.08, 3)
        img += np.sin(2 * np.pi * (freq[0] * xx + freq[1] * yy) + phase)[..., None] * tint
    img += rng.normal(0.0, 0.02, img.shape)
    return img


def landmark_colors(L: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(0.85 * k / max(L - 1, 1), 0.9, 1.0) for k in range(L)])


def render_face_proxy(posed: np.ndarray, rng: np.random.Generator, size: int,
                      splat_sigma: float = 1.1) -> np.ndarray:
    """Depth-shaded colored splats (far landmarks painted first) over a smooth noisy background."""
    img = _background(rng, size)
    L = posed.shape[1]
    colors = landmark_colors(L)
    z = posed[2]
    depth = (z - z.min()) / (np.ptp(z) + 1e-12)
    grid = np.arange(size)
    radius = int(np.ceil(3 * splat_sigma))
    for k in np.argsort(z, kind="stable"):
        x, y = posed[0, k], posed[1, k]
        cx, cy = int(np.floor(x + 0.5)), int(np.floor(y + 0.5))
        xs = grid[max(cx - radius, 0):min(cx + radius + 1, size)]
        ys = grid[max(cy - radius, 0):min(cy + radius + 1, size)]
        if xs.size == 0 or ys.size == 0:
            continue
        g = np.exp(-0.5 * (((ys[:, None] - y) ** 2 + (xs[None, :] - x) ** 2) / splat_sigma ** 2))
        shade = 0.55 + 0.45 * depth[k]
        patch = img[ys[0]:ys[-1] + 1, xs[0]:xs[-1] + 1]
        patch += g[..., None] * (colors[k] * shade - patch)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_dataset(model: MorphableModel, n: int, seed: int,
                               config: PipelineConfig | None = None) -> Dataset:
    if n < 1:
        raise ContractViolation("dataset size must be >= 1")
    config = config or PipelineConfig(landmarks=model.landmark_count)
    rng = np.random.default_rng(seed)
    size = config.image_size
    images = np.empty((n, size, size, 3))
    landmarks = np.empty((n, 3, model.landmark_count))
    params, yaws = [], np.empty(n)
    for i in range(n):
        p = sample_params(model, rng, config)
        posed = posed_shape(model, p)
        images[i] = render_face_proxy(posed, rng, size)
        landmarks[i] = posed
        params.append(p)
        yaws[i] = np.rad2deg(p.euler[1])
    return Dataset(images, landmarks, yaws, params)


def quantize(ds: Dataset) -> Dataset:
    """The dataset as it reads back from disk (8-bit images)."""
    return Dataset(to_uint8(ds.images).astype(np.float64) / 255.0, ds.landmarks.copy(),
                   ds.yaw_deg, ds.params)


def save_dataset(ds: Dataset, directory, config: PipelineConfig, seed: int) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(len(ds)):
        write_ppm(directory / f"img{i:04d}.ppm", to_uint8(ds.images[i]))
        lines = [" ".join(repr(float(v)) for v in ds.landmarks[i][:, k]) for k in range(ds.landmarks.shape[2])]
        (directory / f"lm{i:04d}.txt").write_bytes(("\n".join(lines) + "\n").encode("ascii"))
    meta = {
        "schema_version": SCHEMA_VERSION,
        "seed": seed,
        "count": len(ds),
        "image_size": ds.image_size,
        "landmarks": int(ds.landmarks.shape[2]),
        "config": config.to_dict(),
        "yaw_deg": None if ds.yaw_deg is None else [float(y) for y in ds.yaw_deg],
        "yaw_bin_counts": None if ds.yaw_deg is None else yaw_bin_counts(ds.yaw_deg),
    }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return directory


def read_landmark_file(path) -> np.ndarray:
    """3 x L (missing z column filled with zeros)."""
    rows = []
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read landmarks {path}: {exc}") from exc
    for line in text.splitlines():
        if line.strip():
            vals = [float(v) for v in line.split()]
            if len(vals) not in (2, 3):
                raise DataError(f"{path}: expected 'x y [z]', got {line!r}")
            rows.append(vals + [0.0] * (3 - len(vals)))
    return np.array(rows).T


def load_dataset(directory) -> tuple[Dataset, dict]:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise DataError(f"dataset meta.json not found in {directory}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed {meta_path}: {exc}") from exc
    count = int(meta.get("count", 0))
    if count < 1:
        raise ContractViolation(f"dataset in {directory} is empty")
    images, landmarks = [], []
    for i in range(count):
        img = read_ppm(directory / f"img{i:04d}.ppm")
        if img.ndim != 3:
            raise DataError(f"img{i:04d}.ppm is not RGB")
        images.append(img.astype(np.float64) / 255.0)
        landmarks.append(read_landmark_file(directory / f"lm{i:04d}.txt"))
    shapes = {lm.shape for lm in landmarks}
    if len(shapes) != 1:
        raise DataError(f"inconsistent landmark counts in {directory}: {shapes}")
    yaw = meta.get("yaw_deg")
    ds = Dataset(np.stack(images), np.stack(landmarks), None if yaw is None else np.asarray(yaw, float))
    return ds, meta
