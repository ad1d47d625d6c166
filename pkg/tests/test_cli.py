import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from evodhm import cli
from evodhm import morphable_model as mm
from evodhm.evaluation import nme
from evodhm.heatmap import centered_pose, mean_initial_heatmap, window_radius
from evodhm.imageio import read_ppm
from evodhm.pipeline import PipelineConfig, build_network, load_network
from evodhm.pipeline.dataset import load_dataset, yaw_bin_counts


def tree_hash(directory: Path, skip=()) -> str:
    h = hashlib.sha256()
    for path in sorted(Path(directory).rglob("*")):
        if path.is_file() and path.name not in skip:
            h.update(path.relative_to(directory).as_posix().encode())
            h.update(path.read_bytes())
    return h.hexdigest()


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen-data", "--n", 6, "--seed", 3, "--image-size", 32, "--out", out) == 0
    return out


@pytest.fixture(scope="module")
def fast_model(tmp_path_factory, small_data):
    out = tmp_path_factory.mktemp("fast")
    assert run("train", "--data", small_data, "--variant", "fast", "--epochs", 1, "--out", out) == 0
    return out / "model.evam"


def test_gen_data_is_deterministic(tmp_path, small_data):
    assert run("gen-data", "--n", 6, "--seed", 3, "--image-size", 32, "--out", tmp_path / "again") == 0
    assert tree_hash(tmp_path / "again") == tree_hash(small_data)


def test_gen_data_rejects_empty(tmp_path):
    assert run("gen-data", "--n", 0, "--out", tmp_path) == cli.EXIT_USAGE


def test_meta_echoes_yaw_bins(small_data):
    meta = json.loads((small_data / "meta.json").read_text())
    assert meta["yaw_bin_counts"] == yaw_bin_counts(meta["yaw_deg"])
    assert sum(meta["yaw_bin_counts"]) == meta["count"] == 6
    assert meta["schema_version"] == 1 and meta["config"]["image_size"] == 32


def test_landmark_files_are_lf_text(small_data):
    raw = (small_data / "lm0000.txt").read_bytes()
    assert b"\r" not in raw and raw.endswith(b"\n") and len(raw.splitlines()) == 68


def test_usage_errors_exit_2(tmp_path):
    assert run("no-such-command") == cli.EXIT_USAGE
    assert run("gen-data", "--out", tmp_path) == cli.EXIT_USAGE
    assert run("cost", "--layer", "depthwise:1:2", "--out", tmp_path) == cli.EXIT_USAGE


def test_train_writes_parseable_model(fast_model):
    net = load_network(fast_model)
    assert net.kind == "fast_dhm" and net.config.epochs == 1
    log = (fast_model.parent / "train_log.csv").read_text().splitlines()
    assert log[0] == "epoch,step,loss,lr,nme_train" and len(log) == 2
    assert json.loads((fast_model.parent / "run.json").read_text())["config"]["variant"] == "fast_dhm"


def test_zero_learning_rate_keeps_initial_weights(tmp_path, small_data):
    assert run("train", "--data", small_data, "--variant", "fast", "--epochs", 2, "--lr", 0,
               "--seed", 5, "--out", tmp_path) == 0
    trained = load_network(tmp_path / "model.evam")
    cfg = trained.config
    initial = build_network(cfg, mm.generate_synthetic_model(cfg.model_seed, cfg.landmarks, cfg.k_id, cfg.k_exp), 5)
    a, _ = trained.parameters()
    b, _ = initial.parameters()
    assert a.keys() == b.keys()
    for k in a:
        assert hashlib.sha256(a[k].tobytes()).digest() == hashlib.sha256(b[k].tobytes()).digest(), k


def test_divergence_exits_4_with_dump(tmp_path, small_data):
    assert run("train", "--data", small_data, "--variant", "fast", "--epochs", 3, "--lr", 1e300,
               "--out", tmp_path) == cli.EXIT_NUMERIC
    dump = np.load(tmp_path / "nan_batch.npz")
    assert dump["images"].shape[1:] == (32, 32, 3)


def test_config_file_precedence(tmp_path, small_data):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# training settings\nepochs = 2\nbatch_size = 4\n")
    assert run("train", "--data", small_data, "--variant", "fast", "--config", cfg, "--epochs", 1,
               "--out", tmp_path / "a") == 0
    echoed = json.loads((tmp_path / "a" / "run.json").read_text())["config"]
    assert echoed["epochs"] == 1 and echoed["batch_size"] == 4


def test_eval_outputs_and_report_consistency(tmp_path, small_data, fast_model):
    assert run("eval", "--model", fast_model, "--data", small_data, "--out", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["schema_version"] == 1
    rows = (tmp_path / "per_sample.csv").read_text().splitlines()[1:]
    values = [float(r.split(",")[1]) for r in rows]
    assert report["mean_nme"] == pytest.approx(np.mean(values), rel=1e-15)
    assert (tmp_path / "ced.svg").read_text().startswith("<svg")
    assert (tmp_path / "ced.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_mean_shape_stub_matches_oracle(tmp_path, small_data):
    assert run("train", "--data", small_data, "--variant", "mean_shape", "--out", tmp_path / "m") == 0
    assert run("eval", "--model", tmp_path / "m" / "model.evam", "--data", small_data, "--out", tmp_path / "e") == 0
    report = json.loads((tmp_path / "e" / "report.json").read_text())

    # oracle: project the mean shape under the centered frontal pose by hand
    model = mm.generate_synthetic_model(1, 68, 8, 4)
    size = 32
    f = 0.6 * size
    mean = model.mean_shape
    cx, cy = mean[0].mean(), mean[1].mean()
    pred = np.stack([f * mean[0] + (size - 1) / 2 - f * cx, f * mean[1] + (size - 1) / 2 - f * cy])
    ds, _ = load_dataset(small_data)
    expected = [nme(pred, gt) for gt in ds.landmarks_2d()]
    np.testing.assert_allclose(report["per_sample_nme"], expected, rtol=1e-12)


def test_eval_rejects_empty_and_mismatched(tmp_path, small_data, fast_model):
    empty = tmp_path / "empty"
    empty.mkdir()
    (empty / "meta.json").write_text(json.dumps({"count": 0}))
    assert run("eval", "--model", fast_model, "--data", empty, "--out", tmp_path / "o1") == cli.EXIT_USAGE
    assert run("gen-data", "--n", 2, "--out", tmp_path / "big") == 0          # 64 px
    assert run("eval", "--model", fast_model, "--data", tmp_path / "big", "--out", tmp_path / "o2") == cli.EXIT_DATA
    assert run("eval", "--model", tmp_path / "missing.evam", "--data", small_data,
               "--out", tmp_path / "o3") == cli.EXIT_DATA


def test_bench_width_ratio_and_repeatability(tmp_path):
    params = []
    for mult, sub in ((1, "a"), (2, "b"), (1, "c")):
        assert run("bench", "--multiplier", mult, "--iters", 10, "--warmup", 1, "--out", tmp_path / sub) == 0
        doc = json.loads((tmp_path / sub / "bench.json").read_text())
        assert doc["schema_version"] == 1 and doc["frames_per_second"] > 0
        assert set(doc) >= {"parameters", "serialized_bytes", "mult_adds_per_frame", "thread_policy"}
        params.append(doc["parameters"])
    assert 2 < params[1] / params[0] <= 4
    assert params[0] == params[2]


def test_cost_rows(tmp_path, capsys):
    assert run("cost", "--layer", "depthwise:112:3:64", "--layer", "standard:10:1:8:16",
               "--layer", "pointwise:10:1:8:16", "--out", tmp_path) == 0
    assert "7,225,344" in capsys.readouterr().out
    doc = json.loads((tmp_path / "cost.json").read_text())
    rows = doc["rows"]
    assert rows[0]["mult_adds"] == 7_225_344
    assert (rows[1]["mult_adds"], rows[1]["parameters"]) == (rows[2]["mult_adds"], rows[2]["parameters"])
    assert doc["totals"]["mult_adds"] == sum(r["mult_adds"] for r in rows)
    assert doc["totals"]["parameters"] == sum(r["parameters"] for r in rows)


def test_cost_network_table(tmp_path):
    assert run("cost", "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "cost.json").read_text())
    assert doc["totals"]["mult_adds"] == sum(r["mult_adds"] for r in doc["rows"])
    assert doc["separable_vs_standard_wide"]["ratio"] < 0.15


def test_export_mean_heatmap_mask(tmp_path):
    assert run("export-heatmap", "--out", tmp_path) == 0
    img = read_ppm(tmp_path / "mean_heatmap.ppm")
    cfg = PipelineConfig()
    model = mm.generate_synthetic_model(1, 68, 8, 4)
    hm = mean_initial_heatmap(model, centered_pose(model, cfg.resolution), cfg.resolution, 1.0)
    np.testing.assert_array_equal(img, np.floor(hm.data * 255 + 0.5).astype(np.uint8))
    pts = mm.project_weak_perspective(model, centered_pose(model, cfg.resolution))
    r = window_radius(1.0)
    allowed = np.zeros(cfg.resolution, bool)
    for x, y in np.floor(pts.T + 0.5).astype(int):
        allowed[max(y - r, 0):y + r + 1, max(x - r, 0):x + r + 1] = True
    assert not np.any(img.any(axis=2) & ~allowed)


def test_export_zero_landmark_model_is_black(tmp_path):
    empty = mm.MorphableModel(np.zeros((3, 0)), np.zeros((0, 1)), np.zeros((0, 1)))
    mm.save_model(empty, tmp_path / "empty.evam")
    assert run("export-heatmap", "--model-file", tmp_path / "empty.evam", "--out", tmp_path / "o") == 0
    img = read_ppm(tmp_path / "o" / "mean_heatmap.ppm")
    assert img.shape == (64, 64, 3) and not img.any()


def test_export_single_channel(tmp_path):
    assert run("export-heatmap", "--channel", "y", "--image-size", 32, "--out", tmp_path) == 0
    assert read_ppm(tmp_path / "mean_heatmap_y.ppm").shape == (32, 32)


def test_outputs_stay_under_out_dir(tmp_path, monkeypatch, small_data, fast_model):
    cwd = tmp_path / "cwd"
    cwd.mkdir()
    monkeypatch.chdir(cwd)
    out = tmp_path / "o"
    assert run("eval", "--model", fast_model, "--data", small_data, "--out", out) == 0
    assert run("cost", "--out", out) == 0
    assert list(cwd.iterdir()) == []


def test_deterministic_train_and_eval(tmp_path, small_data):
    digests = []
    for sub in ("a", "b"):
        assert run("train", "--data", small_data, "--variant", "fast", "--epochs", 2, "--deterministic",
                   "--seed", 9, "--out", tmp_path / sub) == 0
        assert run("eval", "--model", tmp_path / sub / "model.evam", "--data", small_data,
                   "--deterministic", "--out", tmp_path / sub / "eval") == 0
        # eval/run.json echoes the --model path, which differs between a and b
        digests.append(tree_hash(tmp_path / sub, skip=("run.json",)))
        digests.append(tree_hash(tmp_path / sub / "eval", skip=("run.json",)))
    assert digests[0] == digests[2] and digests[1] == digests[3]
    assert (tmp_path / "a" / "run.json").read_bytes() == (tmp_path / "b" / "run.json").read_bytes()
