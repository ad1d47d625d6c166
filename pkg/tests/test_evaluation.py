import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evodhm import evaluation as ev
from evodhm.errors import ContractViolation
from evodhm.morphable_model import generate_synthetic_model
from evodhm.pipeline import PipelineConfig, build_network


def square(side=100.0, n=4):
    xs = np.linspace(0, side, n)
    return np.stack([xs, xs[::-1]])


def test_nme_hand_case():
    gt = square()
    pred = gt + 1.0
    assert ev.nme(pred, gt) == math.sqrt(2) / 100


def test_nme_zero_on_exact_match():
    gt = square()
    assert ev.nme(gt, gt) == 0.0


def test_nme_uses_given_bbox():
    gt = square()
    assert ev.nme(gt + [[3.0], [4.0]], gt, bbox=(25.0, 4.0)) == 0.5


def test_degenerate_bbox_rejected():
    with pytest.raises(ContractViolation):
        ev.nme(np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ContractViolation):
        ev.nme(np.zeros((2, 3)), square(n=3), bbox=(0.0, 1.0))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 100))
def test_nme_scale_and_translation_invariant(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(0, 50, (2, 10))
    pred = gt + rng.normal(0, 2, gt.shape)
    shift = rng.uniform(-20, 20, (2, 1))
    assert ev.nme(k * pred + shift, k * gt + shift) == pytest.approx(ev.nme(pred, gt), rel=1e-9)


def test_failure_threshold_is_strict():
    e = [0.01, 0.06, 0.0600001, 0.2]
    assert ev.failure_rate(e) == 0.5
    assert dict(ev.ced_curve(e))[0.06] == 1 - ev.failure_rate(e)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 0.3), min_size=1, max_size=60))
def test_ced_properties(errors):
    curve = ev.ced_curve(errors)
    fractions = [f for _, f in curve]
    assert len(curve) == 121
    assert all(b >= a for a, b in zip(fractions, fractions[1:]))
    assert 0.0 <= fractions[0] <= fractions[-1] <= 1.0
    assert dict(curve)[ev.FAILURE_THRESHOLD] == 1 - ev.failure_rate(errors)


def test_ced_needs_samples():
    with pytest.raises(ContractViolation):
        ev.ced_curve([])


@settings(max_examples=200, deadline=None)
@given(st.floats(-90, 90))
def test_pose_bins_partition(yaw):
    b = int(ev.pose_bin_index([yaw])[0])
    lo, hi = [(0, 30), (30, 60), (60, 90.0001)][b]
    assert lo <= abs(yaw) < hi


def test_pose_bin_edges():
    np.testing.assert_array_equal(ev.pose_bin_index([0, 29.999, 30, -59.9, 60, 90, -90]), [0, 0, 1, 1, 2, 2, 2])


def test_report_omits_empty_bins():
    r = ev.pose_binned_report([0.01, 0.03], [10.0, -20.0])
    assert r.pose_bin_means == {"[0,30)": 0.02}
    doc = json.loads(r.to_json())
    assert doc["schema_version"] == ev.SCHEMA_VERSION
    assert doc["failure_rate"] == 0.0 and not any(math.isnan(v) for v in doc["pose_bin_means"].values())
    assert r.per_sample_csv().splitlines()[0] == "sample,nme"


def test_ced_svg_is_standalone():
    svg = ev.ced_svg(ev.ced_curve([0.01, 0.05]))
    assert svg.startswith("<svg") and "polyline" in svg


def test_evaluate_and_benchmark_small_network():
    from evodhm.pipeline import generate_synthetic_dataset

    model = generate_synthetic_model(1, 68, 8, 4)
    cfg = PipelineConfig(variant="fast_dhm", image_size=32)
    net = build_network(cfg, model, seed=0)
    ds = generate_synthetic_dataset(model, 4, 0, cfg)
    report = ev.evaluate(net, ds)
    assert len(report.per_sample_nme) == 4 and len(report.per_stage_mean_nme) == cfg.steps + 1
    with pytest.raises(ContractViolation):
        ev.benchmark(net, iters=5)
    bench = ev.benchmark(net, warmup=1, iters=10)
    assert bench.frames_per_second > 0 and bench.mult_adds_per_frame == net.cost().mult_adds
    assert json.loads(bench.to_json())["schema_version"] == ev.SCHEMA_VERSION
