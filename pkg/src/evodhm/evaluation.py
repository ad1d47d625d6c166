"""Alignment metrics (NME, CED, failure rate, pose bins) and the CPU benchmark."""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation

FAILURE_THRESHOLD = 0.06
CED_GRID = np.linspace(0.0, 0.12, 121)
POSE_BINS = ("[0,30)", "[30,60)", "[60,90]")
SCHEMA_VERSION = 1


def bbox_from_landmarks(landmarks) -> tuple[float, float]:
    """Tight axis-aligned (width, height) of a 2 x L landmark set."""
    pts = np.asarray(landmarks, dtype=np.float64)[:2]
    if pts.shape[1] < 2:
        raise ContractViolation("bounding box needs at least 2 landmarks")
    w, h = np.ptp(pts, axis=1)
    if w == 0 and h == 0:
        raise ContractViolation("all landmarks coincide; bounding box is degenerate")
    return float(w), float(h)


def nme(predicted, ground_truth, bbox=None) -> float:
    """Mean Euclidean landmark error divided by sqrt(w_bbox * h_bbox)."""
    pred = np.asarray(predicted, dtype=np.float64)[:2]
    gt = np.asarray(ground_truth, dtype=np.float64)[:2]
    if pred.shape != gt.shape:
        raise ContractViolation(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    w, h = bbox_from_landmarks(gt) if bbox is None else bbox
    if not (w > 0 and h > 0):
        raise ContractViolation(f"bounding box must have positive sides, got {(w, h)}")
    return float(np.mean(np.linalg.norm(pred - gt, axis=0)) / np.sqrt(w * h))


def nme_batch(predicted, ground_truth) -> np.ndarray:
    """Per-sample NME for ``(N, 2, L)`` arrays, bbox taken from ground truth."""
    return np.array([nme(p, g) for p, g in zip(predicted, ground_truth)])


def failure_rate(per_sample_nme, threshold: float = FAILURE_THRESHOLD) -> float:
    e = np.asarray(per_sample_nme, dtype=np.float64)
    return float(np.count_nonzero(e > threshold)) / e.size


def ced_curve(per_sample_nme, threshold_grid=CED_GRID) -> list[tuple[float, float]]:
    """Fraction of samples with NME <= each threshold."""
    e = np.sort(np.asarray(per_sample_nme, dtype=np.float64))
    if e.size == 0:
        raise ContractViolation("CED needs at least one sample")
    grid = np.asarray(threshold_grid, dtype=np.float64)
    counts = np.searchsorted(e, grid, side="right")
    # written as 1 - misses/n so the value at the failure threshold is
    # bitwise equal to 1 - failure_rate
    return [(float(t), 1.0 - float(e.size - c) / e.size) for t, c in zip(grid, counts)]


def pose_bin_index(yaw_deg) -> np.ndarray:
    """0, 1, 2 for |yaw| in [0,30), [30,60), [60,90]."""
    a = np.abs(np.asarray(yaw_deg, dtype=np.float64))
    return np.digitize(a, [30.0, 60.0])


@dataclass
class NmeReport:
    per_sample_nme: list
    mean_nme: float
    pose_bin_means: dict          # bin label -> mean, absent bins omitted
    failure_rate: float
    per_stage_mean_nme: list = field(default_factory=list)
    ced: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {"schema_version": SCHEMA_VERSION, "failure_threshold": FAILURE_THRESHOLD, **asdict(self)}
        return json.dumps(doc, indent=1)

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["sample", "nme"])
        for i, e in enumerate(self.per_sample_nme):
            writer.writerow([i, repr(float(e))])
        return buf.getvalue()


def pose_binned_report(per_sample_nme, yaw_deg=None, per_stage=None) -> NmeReport:
    e = np.asarray(per_sample_nme, dtype=np.float64)
    if e.size == 0:
        raise ContractViolation("report needs at least one sample")
    bins = {}
    if yaw_deg is not None:
        idx = pose_bin_index(yaw_deg)
        for b, label in enumerate(POSE_BINS):
            mask = idx == b
            if mask.any():
                bins[label] = float(e[mask].mean())
    stages = [] if per_stage is None else [float(np.mean(s)) for s in per_stage]
    return NmeReport([float(v) for v in e], float(e.mean()), bins, failure_rate(e), stages, ced_curve(e))


def ced_svg(curve, width: int = 360, height: int = 240, title: str = "CED") -> str:
    """Standalone SVG line plot of a CED curve."""
    margin = 36
    xs = [t for t, _ in curve]
    x_max = max(xs) if max(xs) > 0 else 1.0
    pts = " ".join(
        f"{margin + (width - 2 * margin) * t / x_max:.2f},{height - margin - (height - 2 * margin) * f:.2f}"
        for t, f in curve)
    fx = margin + (width - 2 * margin) * FAILURE_THRESHOLD / x_max
    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>\n'
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>\n'
        f'<line x1="{fx:.2f}" y1="{margin}" x2="{fx:.2f}" y2="{height - margin}" stroke="grey" stroke-dasharray="4"/>\n'
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>\n'
        f'<text x="{width / 2}" y="{margin / 2}" text-anchor="middle" font-size="12">{title}</text>\n'
        f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="10">NME (0 to {x_max:g})</text>\n'
        f'<text x="10" y="{height / 2}" font-size="10" transform="rotate(-90 10 {height / 2})">fraction</text>\n'
        "</svg>\n")


def evaluate(network, dataset, batch_size: int = 32) -> NmeReport:
    """Run ``network`` over ``dataset`` and build the pose-binned report."""
    if len(dataset) == 0:
        raise ContractViolation("evaluation set is empty")
    preds = []
    for start in range(0, len(dataset), batch_size):
        preds.append(network.predict_stages(dataset.images[start:start + batch_size]))
    stages = np.concatenate(preds, axis=1)            # S x N x 2 x L
    gt = dataset.landmarks_2d()
    per_stage = [nme_batch(s, gt) for s in stages]
    return pose_binned_report(per_stage[-1], dataset.yaw_deg, per_stage)


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchReport:
    frames_per_second: float
    parameters: int
    serialized_bytes: int
    mult_adds_per_frame: int
    thread_policy: str
    timed_boundary: str
    iters: int
    warmup: int

    def to_json(self) -> str:
        return json.dumps({"schema_version": SCHEMA_VERSION, **asdict(self)}, indent=1)


def single_thread_limits():
    """Context manager pinning BLAS/OpenMP pools to one thread (no-op if unavailable)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:                                   # pragma: no cover
        import contextlib
        return contextlib.nullcontext()
    return threadpool_limits(limits=1)


def benchmark(network, config=None, warmup: int = 3, iters: int = 20, image=None) -> BenchReport:
    """Single-threaded frames/s of one-image inference, model loading excluded.

    The timed region covers input-stack construction (image + heat map)
    and the full forward pass, per frame.
    """
    from .pipeline.networks import ClassicDHMNetwork, classic_forward, fast_forward

    if iters < 10:
        raise ContractViolation("benchmark needs iters >= 10")
    config = config or network.config
    size = config.image_size
    if image is None:
        image = np.random.default_rng(0).uniform(0, 1, (size, size, 3))
    run = (lambda: classic_forward(network, image)) if isinstance(network, ClassicDHMNetwork) \
        else (lambda: fast_forward(network, image))
    with single_thread_limits():
        for _ in range(warmup):
            run()
        t0 = time.perf_counter()
        for _ in range(iters):
            result = run()
        elapsed = time.perf_counter() - t0
    return BenchReport(
        frames_per_second=iters / elapsed,
        parameters=network.cost().parameters,
        serialized_bytes=network.serialized_size("f32"),
        mult_adds_per_frame=result.mult_adds,
        thread_policy="single-thread (BLAS/OpenMP pools limited to 1)",
        timed_boundary="input stack build + forward pass; model load excluded",
        iters=iters, warmup=warmup)
