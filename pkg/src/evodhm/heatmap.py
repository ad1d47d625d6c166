"""Three-channel diffusion heat maps built from posed 3D landmarks.

Each channel stores one normalized coordinate axis (x, y, z) of the
landmarks, spread over the image by a truncated Gaussian centered on the
landmark's projected position. Overlapping splats combine by maximum.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .morphable_model import MorphableModel, PoseShapeParams, posed_shape

DEGENERATE_VALUE = 0.5


class DegenerateAxisWarning(RuntimeWarning):
    """A coordinate axis had zero range; its channel was filled with 0.5."""


@dataclass(frozen=True)
class DiffusionHeatMap:
    data: np.ndarray   # H x W x 3
    sigma: float

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class InputStack:
    data: np.ndarray   # H x W x 6, image RGB then heat map


def normalize_channel(values) -> np.ndarray:
    """Shift to zero minimum and divide by the range; constant input maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 2:
        raise ContractViolation("normalize_channel needs a vector of at least 2 values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        warnings.warn("degenerate axis (max == min); channel set to 0.5",
                      DegenerateAxisWarning, stacklevel=2)
        return np.full_like(v, DEGENERATE_VALUE)
    return (v - lo) / (hi - lo)


def normalize_channel_vjp(values, grad) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    g = np.asarray(grad, dtype=np.float64)
    lo_i, hi_i = int(np.argmin(v)), int(np.argmax(v))
    span = v[hi_i] - v[lo_i]
    if span == 0:
        return np.zeros_like(v)
    out = (v - v[lo_i]) / span
    gv = g / span
    s_all = g.sum() / span
    s_out = float(g @ out) / span
    gv[lo_i] += s_out - s_all
    gv[hi_i] -= s_out
    return gv


def normalize_shape(shape3d: np.ndarray) -> np.ndarray:
    """Normalize each row of a 3 x L shape independently."""
    return np.vstack([normalize_channel(row) for row in np.asarray(shape3d)])


def window_radius(sigma: float) -> int:
    return int(math.ceil(3.0 * sigma))


def _axis_profiles(centers, size, sigma):
    """Masked 1D Gaussian profiles, one row per landmark (L x size)."""
    grid = np.arange(size, dtype=np.float64)
    rounded = np.floor(centers + 0.5)
    offset = grid[None, :] - centers[:, None]
    inside = np.abs(grid[None, :] - rounded[:, None]) <= window_radius(sigma)
    prof = np.where(inside, np.exp(-0.5 * (offset / sigma) ** 2), 0.0)
    return prof, offset


def _splat(locs, values, resolution, sigma):
    h, w = resolution
    px, off_x = _axis_profiles(locs[0], w, sigma)
    py, off_y = _axis_profiles(locs[1], h, sigma)
    gauss = py[:, :, None] * px[:, None, :]                    # L x H x W
    weighted = values[:, :, None, None] * gauss[None]          # 3 x L x H x W
    winner = np.argmax(weighted, axis=1)                       # 3 x H x W
    data = np.take_along_axis(weighted, winner[:, None], axis=1)[:, 0]
    return data, (gauss, off_x, off_y, winner)


def rasterize_heatmap(shape2d, normalized_xyz, resolution, sigma: float = 1.0) -> DiffusionHeatMap:
    """Splat per-landmark values with a Gaussian of std ``sigma`` pixels.

    Pixel (row i, col j) has its center at x = j, y = i. The window is
    centered on the rounded landmark position with radius ceil(3 sigma);
    the Gaussian itself is evaluated at the sub-pixel location.
    """
    if not sigma > 0:
        raise ContractViolation(f"sigma must be positive, got {sigma}")
    locs = np.asarray(shape2d, dtype=np.float64).reshape(2, -1)
    values = np.asarray(normalized_xyz, dtype=np.float64).reshape(3, -1)
    h, w = resolution
    if locs.shape[1] == 0:
        return DiffusionHeatMap(np.zeros((h, w, 3)), float(sigma))
    data, _ = _splat(locs, values, (h, w), sigma)
    out = np.ascontiguousarray(np.moveaxis(data, 0, -1))
    assert out.min() >= 0.0 and out.max() <= 1.0, "heat map left [0, 1]"
    return DiffusionHeatMap(out, float(sigma))


def rasterize_heatmap_vjp(shape2d, normalized_xyz, resolution, sigma, grad_map):
    """Gradients of :func:`rasterize_heatmap` w.r.t. locations (2 x L) and values (3 x L).

    Window membership is treated as locally constant, which holds except
    on a measure-zero set of locations.
    """
    locs = np.asarray(shape2d, dtype=np.float64).reshape(2, -1)
    values = np.asarray(normalized_xyz, dtype=np.float64).reshape(3, -1)
    L = locs.shape[1]
    _, (gauss, off_x, off_y, winner) = _splat(locs, values, resolution, sigma)
    g = np.moveaxis(np.asarray(grad_map, dtype=np.float64), -1, 0)   # 3 x H x W
    onehot = winner[:, None] == np.arange(L)[None, :, None, None]   # 3 x L x H x W
    routed = np.where(onehot, g[:, None], 0.0)
    grad_values = np.einsum("clhw,lhw->cl", routed, gauss)
    # d gauss / d loc = gauss * offset / sigma^2 per axis
    contrib = np.einsum("clhw,cl->lhw", routed, values) * gauss / sigma ** 2
    grad_locs = np.vstack([np.einsum("lhw,lw->l", contrib, off_x),
                           np.einsum("lhw,lh->l", contrib, off_y)])
    return grad_locs, grad_values


def heatmap_from_posed(posed3d: np.ndarray, resolution, sigma: float = 1.0) -> DiffusionHeatMap:
    """Heat map of an already-posed 3 x L shape (rows 0-1 in pixels)."""
    posed3d = np.asarray(posed3d, dtype=np.float64)
    if posed3d.shape[1] == 0:
        return rasterize_heatmap(np.zeros((2, 0)), np.zeros((3, 0)), resolution, sigma)
    return rasterize_heatmap(posed3d[:2], normalize_shape(posed3d), resolution, sigma)


def build_input_stack(image: np.ndarray, heatmap: DiffusionHeatMap) -> InputStack:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"image must be H x W x 3, got {img.shape}")
    if img.shape[:2] != heatmap.resolution:
        raise ContractViolation(
            f"image resolution {img.shape[:2]} != heat map resolution {heatmap.resolution}")
    return InputStack(np.concatenate([img, heatmap.data], axis=2))


def centered_pose(model: MorphableModel, resolution, fill: float = 0.6) -> PoseShapeParams:
    """Frontal pose that puts the landmark centroid at the image center.

    ``fill`` is the fraction of the image side covered by the unit model cube.
    """
    h, w = resolution
    f = fill * min(h, w)
    centroid = model.mean_shape[:2].mean(axis=1) if model.landmark_count else np.zeros(2)
    center = ((w - 1) / 2.0 - f * centroid[0], (h - 1) / 2.0 - f * centroid[1])
    return PoseShapeParams.neutral(model, f, center)


def mean_initial_heatmap(model: MorphableModel, default_pose: PoseShapeParams | None,
                         resolution, sigma: float = 1.0) -> DiffusionHeatMap:
    """Heat map of the mean shape (coefficients zeroed) under ``default_pose``."""
    if default_pose is None:
        default_pose = centered_pose(model, resolution)
    pose = PoseShapeParams(default_pose.scale_f, default_pose.euler, default_pose.translation_2d,
                           np.zeros(model.k_id), np.zeros(model.k_exp))
    return heatmap_from_posed(posed_shape(model, pose), resolution, sigma)


def heatmap_to_uint8(heatmap: DiffusionHeatMap, channel: int | None = None) -> np.ndarray:
    """Byte image of one channel (H x W) or of the RGB composite (H x W x 3)."""
    from .imageio import to_uint8

    data = heatmap.data if channel is None else heatmap.data[:, :, channel]
    return to_uint8(data)
