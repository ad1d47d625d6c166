"""Command-line interface: ``evodhm <subcommand> [options]``.

Subcommands: gen-data, train, eval, bench, cost, export-heatmap. Every run
writes ``run.json`` (the resolved configuration) into ``--out``.
Configuration precedence is command-line flag > ``--config`` file > default.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ContractViolation, DataError, NumericError
from .evaluation import SCHEMA_VERSION

log = logging.getLogger("evodhm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
WIDE_BLOCKS = 64

VARIANT_ALIASES = {"fast": "fast_dhm", "fast_dhm": "fast_dhm", "classic": "classic_dhm",
                   "classic_dhm": "classic_dhm", "mean_shape": "mean_shape"}

# flag dest -> PipelineConfig field, for flags that override the config
CONFIG_FLAGS = {
    "image_size": "image_size", "landmarks": "landmarks", "k_id": "k_id", "k_exp": "k_exp",
    "model_seed": "model_seed", "steps": "steps", "sigma": "sigma", "multiplier": "width_multiplier",
    "epochs": "epochs", "batch_size": "batch_size", "lr": "lr", "stage_loss_weight": "stage_loss_weight",
    "grad_clip": "grad_clip", "ablation": "ablation", "heatmap_grad": "heatmap_grad",
}


class UsageError(ContractViolation):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _non_negative_float(text):
    v = float(text)
    if not v >= 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--deterministic", action="store_true",
                        help="force single-threaded kernels for bitwise-repeatable runs")
    common.add_argument("-v", "--verbose", action="store_true")

    model_opts = argparse.ArgumentParser(add_help=False)
    g = model_opts.add_argument_group("model / data shape")
    g.add_argument("--image-size", type=_positive_int)
    g.add_argument("--landmarks", type=_positive_int)
    g.add_argument("--k-id", type=_positive_int)
    g.add_argument("--k-exp", type=_positive_int)
    g.add_argument("--model-seed", type=int)

    net_opts = argparse.ArgumentParser(add_help=False)
    g = net_opts.add_argument_group("network")
    g.add_argument("--variant", choices=sorted(VARIANT_ALIASES))
    g.add_argument("--multiplier", type=_positive_int, help="width multiplier of the fast CNN")
    g.add_argument("--steps", type=_positive_int, help="recurrent iterations T")
    g.add_argument("--sigma", type=float)
    g.add_argument("--ablation", choices=["none", "no_heatmap_2d_rnn", "no_recurrence_3d_cnn"])

    parser = _Parser(prog="evodhm", description="Evolutionary diffusion-heat-map face alignment.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common, model_opts], help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True, help="number of samples (>= 1)")

    p = sub.add_parser("train", parents=[common, model_opts, net_opts], help="train a network")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=_positive_int)
    p.add_argument("--lr", type=_non_negative_float)
    p.add_argument("--stage-loss-weight", type=_non_negative_float)
    p.add_argument("--grad-clip", type=float)
    p.add_argument("--heatmap-grad", action="store_const", const=True, default=None,
                   help="backpropagate through heat-map rasterization (classic variant)")

    p = sub.add_parser("eval", parents=[common], help="evaluate a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)

    p = sub.add_parser("bench", parents=[common, model_opts, net_opts], help="CPU speed benchmark")
    p.add_argument("--model", help="trained model (default: fresh network from the config)")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--warmup", type=int, default=3)

    p = sub.add_parser("cost", parents=[common, model_opts, net_opts], help="per-layer cost table")
    p.add_argument("--layer", action="append", default=[], metavar="MODE:S_F:S_K:C_IN[:C_OUT]",
                   help="cost a single layer instead of a network (repeatable)")

    p = sub.add_parser("export-heatmap", parents=[common, model_opts, net_opts],
                       help="write heat maps as PPM images")
    p.add_argument("--channel", choices=["composite", "x", "y", "z"], default="composite")
    p.add_argument("--model-file", help="morphable model file (default: synthetic from the config)")
    p.add_argument("--network", help="trained classic model; exports the map of every iteration")
    p.add_argument("--data", help="dataset directory holding the image for --network")
    p.add_argument("--index", type=int, default=0, help="sample index in --data")
    return parser


# ---------------------------------------------------------------------------
# helpers


def resolve_config(args, base: dict | None = None):
    """Defaults < ``base`` (e.g. dataset echo) < config file < flags."""
    from .pipeline.config import PipelineConfig, read_config_file

    values = dict(base or {})
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for dest, key in CONFIG_FLAGS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
    variant = getattr(args, "variant", None)
    if variant is not None:
        values["variant"] = VARIANT_ALIASES[variant]
    if values.get("variant") == "mean_shape":
        values["variant"] = "fast_dhm"
    return PipelineConfig.from_dict(values)


def _requested_variant(args, config_file_values):
    v = getattr(args, "variant", None) or config_file_values.get("variant")
    return VARIANT_ALIASES.get(v, v)


def _model_for(config):
    from .morphable_model import generate_synthetic_model

    return generate_synthetic_model(config.model_seed, config.landmarks, config.k_id, config.k_exp)


def _write_json(path: Path, doc: dict):
    path.write_text(json.dumps({"schema_version": SCHEMA_VERSION, **doc}, indent=1, sort_keys=True) + "\n")


def _write_run(out: Path, args, config=None, extra=None):
    doc = {"command": args.command, "seed": args.seed, "deterministic": args.deterministic,
           "version": __version__, "config": None if config is None else config.to_dict()}
    for key in ("data", "model", "n", "layer", "channel", "network", "index", "iters", "warmup", "model_file"):
        if hasattr(args, key):
            doc[key] = getattr(args, key)
    doc.update(extra or {})
    _write_json(out / "run.json", doc)


def _load_data(path):
    from .pipeline.dataset import load_dataset

    return load_dataset(path)


def _check_compatible(net, ds, model_path, data_path):
    if ds.image_size != net.config.image_size:
        raise DataError(f"model {model_path} expects {net.config.image_size}px images, "
                        f"dataset {data_path} has {ds.image_size}px")
    if ds.landmarks.shape[2] != net.landmark_count:
        raise DataError(f"model {model_path} predicts {net.landmark_count} landmarks, "
                        f"dataset {data_path} has {ds.landmarks.shape[2]}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, out: Path) -> int:
    from .pipeline.dataset import generate_synthetic_dataset, save_dataset, yaw_bin_counts

    if args.n < 1:
        raise UsageError("--n must be >= 1")
    config = resolve_config(args)
    ds = generate_synthetic_dataset(_model_for(config), args.n, args.seed, config)
    save_dataset(ds, out, config, args.seed)
    _write_run(out, args, config)
    counts = yaw_bin_counts(ds.yaw_deg)
    print(f"wrote {args.n} samples ({config.image_size}px, {config.landmarks} landmarks) to {out}")
    print(f"yaw bins [0,30) [30,60) [60,90]: {counts[0]} {counts[1]} {counts[2]}")
    return EXIT_OK


def cmd_train(args, out: Path) -> int:
    from .pipeline.config import read_config_file
    from .pipeline.networks import MeanShapePredictor, build_network
    from .pipeline.training import train
    from .plotting import plot_training_curve

    ds, meta = _load_data(args.data)
    file_values = read_config_file(args.config) if args.config else {}
    variant = _requested_variant(args, file_values)
    base = dict(meta.get("config") or {})
    config = resolve_config(args, base)
    model = _model_for(config)
    model_path = out / "model.evam"
    if variant == "mean_shape":
        net = MeanShapePredictor.from_model(config, model)
        net.save(model_path)
        _write_run(out, args, config, {"variant": "mean_shape"})
        print(f"wrote mean-shape stub to {model_path}")
        return EXIT_OK

    net = build_network(config, model, args.seed)

    def progress(row):
        log.info("epoch %d  loss %.5g  nme %.4f  lr %.3g", row["epoch"], row["loss"], row["nme_train"], row["lr"])

    net, history = train(ds, config, seed=args.seed, network=net, log_path=out / "train_log.csv",
                         dump_dir=out, progress=progress)
    size = net.save(model_path)
    if history.rows:
        plot_training_curve(history.rows, out / "training_curve.png")
    _write_run(out, args, config)
    final = history.rows[-1]["nme_train"] if history.rows else float("nan")
    print(f"trained {config.variant} for {config.epochs} epochs; final train NME {final:.4f}")
    print(f"model: {model_path} ({size} bytes)")
    return EXIT_OK


def cmd_eval(args, out: Path) -> int:
    from .evaluation import ced_svg, evaluate
    from .pipeline.networks import load_network
    from .plotting import plot_ced, plot_stage_nme

    net = load_network(args.model)
    ds, _ = _load_data(args.data)
    _check_compatible(net, ds, args.model, args.data)
    report = evaluate(net, ds)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "per_sample.csv").write_text(report.per_sample_csv())
    (out / "ced.svg").write_text(ced_svg(report.ced))
    plot_ced({net.kind: report.ced}, out / "ced.png")
    if len(report.per_stage_mean_nme) > 1:
        plot_stage_nme(report.per_stage_mean_nme, out / "stage_nme.png")
    _write_run(out, args, net.config)
    print("----- NME report -----")
    print(f"samples       {len(report.per_sample_nme)}")
    print(f"mean NME      {report.mean_nme:.5f}")
    for label, value in report.pose_bin_means.items():
        print(f"yaw {label:<9} {value:.5f}")
    print(f"failure rate  {report.failure_rate:.4f} (NME > 0.06)")
    if report.per_stage_mean_nme:
        print("per stage     " + " ".join(f"{v:.4f}" for v in report.per_stage_mean_nme))
    print("----------------------")
    return EXIT_OK


def cmd_bench(args, out: Path) -> int:
    from .evaluation import benchmark
    from .pipeline.networks import build_network, load_network

    if args.model:
        net = load_network(args.model)
        config = net.config
    else:
        config = resolve_config(args)
        net = build_network(config, _model_for(config), args.seed)
    report = benchmark(net, config, warmup=args.warmup, iters=args.iters)
    (out / "bench.json").write_text(report.to_json() + "\n")
    _write_run(out, args, config)
    print(f"{config.variant} x{config.width_multiplier}: {report.frames_per_second:.1f} frames/s, "
          f"{report.parameters} parameters, {report.serialized_bytes} bytes, "
          f"{report.mult_adds_per_frame} mult-adds/frame")
    return EXIT_OK


def parse_layer(text: str):
    from .nn.kernels import ConvSpec

    parts = text.split(":")
    if len(parts) not in (4, 5):
        raise UsageError(f"--layer wants MODE:S_F:S_K:C_IN[:C_OUT], got {text!r}")
    mode = parts[0]
    try:
        sf, k, cin = (int(v) for v in parts[1:4])
        cout = int(parts[4]) if len(parts) == 5 else cin
    except ValueError:
        raise UsageError(f"--layer has a non-integer field: {text!r}") from None
    return ConvSpec(k, cin, cout, 1, None, mode), sf


def _cost_rows(args):
    from .nn.cost import report_record

    if args.layer:
        rows = []
        for i, text in enumerate(args.layer):
            spec, sf = parse_layer(text)
            rows.append(report_record(f"layer{i}", spec, sf))
        return rows, None
    from .pipeline.networks import build_network

    config = resolve_config(args)
    net = build_network(config, _model_for(config), args.seed)
    rows = [report_record(name, spec, size) for name, spec, size in net.layer_costs()]
    return rows, net


def separable_vs_standard(net, min_width: int = 1) -> dict:
    """Mult-adds of the depthwise-separable CNN blocks against standard convs of equal shape.

    Only blocks whose output width is at least ``min_width`` are counted.
    """
    from .nn.cost import cost_of
    from .nn.kernels import ConvSpec

    rows = net.layer_costs()
    sep = std = 0
    for i, (name, spec, size) in enumerate(rows):
        if not name.startswith("cnn.") or getattr(spec, "mode", None) != "depthwise":
            continue
        _, pw, pw_size = rows[i + 1]
        if pw.out_channels < min_width:
            continue
        sep += cost_of(spec, size).mult_adds + cost_of(pw, pw_size).mult_adds
        equivalent = ConvSpec(spec.kernel_size, spec.in_channels, pw.out_channels, spec.stride, None, "standard")
        std += cost_of(equivalent, pw_size).mult_adds
    return {"min_width": min_width, "separable_mult_adds": sep, "standard_mult_adds": std,
            "ratio": sep / std if std else None}


def cmd_cost(args, out: Path) -> int:
    rows, net = _cost_rows(args)
    total = {"mult_adds": sum(r["mult_adds"] for r in rows), "parameters": sum(r["parameters"] for r in rows)}
    doc = {"rows": rows, "totals": total}
    width = max([len(r["layer"]) for r in rows] + [5])
    print(f"{'layer':<{width}}  {'mode':<9}  {'mult_adds':>14}  {'params':>10}")
    for r in rows:
        print(f"{r['layer']:<{width}}  {r['mode']:<9}  {r['mult_adds']:>14,}  {r['parameters']:>10,}")
    print(f"{'total':<{width}}  {'':<9}  {total['mult_adds']:>14,}  {total['parameters']:>10,}")
    config = None
    if net is not None:
        config = net.config
        doc["network_parameters"] = net.cost().parameters
        if config.variant == "fast_dhm":
            doc["separable_vs_standard"] = sv = separable_vs_standard(net)
            doc["separable_vs_standard_wide"] = wide = separable_vs_standard(net, WIDE_BLOCKS)
            print(f"separable / standard mult-adds, all CNN blocks: {sv['ratio']:.4f}")
            if wide["ratio"] is not None:
                print(f"separable / standard mult-adds, blocks >= {WIDE_BLOCKS} wide: {wide['ratio']:.4f}")
    _write_json(out / "cost.json", doc)
    _write_run(out, args, config)
    return EXIT_OK


def cmd_export_heatmap(args, out: Path) -> int:
    from .heatmap import centered_pose, heatmap_to_uint8, mean_initial_heatmap
    from .imageio import write_ppm
    from .morphable_model import load_model

    channel = None if args.channel == "composite" else "xyz".index(args.channel)
    suffix = "" if channel is None else f"_{args.channel}"
    if args.network:
        return _export_iterations(args, out, channel, suffix)
    config = resolve_config(args)
    model = load_model(args.model_file) if args.model_file else _model_for(config)
    pose = centered_pose(model, config.resolution, config.face_fill)
    hm = mean_initial_heatmap(model, pose, config.resolution, config.sigma)
    path = out / f"mean_heatmap{suffix}.ppm"
    write_ppm(path, heatmap_to_uint8(hm, channel))
    _write_run(out, args, config)
    print(f"wrote {path}")
    return EXIT_OK


def _export_iterations(args, out, channel, suffix):
    from .heatmap import DiffusionHeatMap, heatmap_to_uint8
    from .imageio import to_uint8, write_ppm
    from .pipeline.networks import ClassicDHMNetwork, classic_forward, load_network
    from .plotting import plot_heatmap_sequence

    net = load_network(args.network)
    if not isinstance(net, ClassicDHMNetwork):
        raise UsageError("--network must be a classic_dhm model (only it regenerates heat maps)")
    if not args.data:
        raise UsageError("--network needs --data for the input image")
    ds, _ = _load_data(args.data)
    _check_compatible(net, ds, args.network, args.data)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} samples")
    result = classic_forward(net, ds.images[args.index])
    paths = []
    for t, hm in enumerate(result.heatmaps):
        path = out / f"heatmap_t{t}{suffix}.ppm"
        write_ppm(path, heatmap_to_uint8(DiffusionHeatMap(hm, net.config.sigma), channel))
        write_ppm(out / f"input_t{t}.ppm", to_uint8(result.input_images[t]))
        paths.append(path)
    distances = [float(np.linalg.norm(b - a)) for a, b in zip(result.heatmaps, result.heatmaps[1:])]
    stages = [result.initial_landmarks] + list(result.stage_landmarks)
    plot_heatmap_sequence(ds.images[args.index], result.heatmaps, out / "heatmap_sequence.png", stages)
    _write_json(out / "heatmap_iterations.json", {"l2_between_iterations": distances,
                                                  "files": [p.name for p in paths]})
    _write_run(out, args, net.config)
    print(f"wrote {len(paths)} iteration maps to {out}; L2 between iterations: "
          + " ".join(f"{d:.3f}" for d in distances))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "cost": cmd_cost, "export-heatmap": cmd_export_heatmap}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"evodhm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .evaluation import single_thread_limits
    from .nn import numerics

    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        guard = single_thread_limits() if args.deterministic else contextlib.nullcontext()
        with guard, numerics.mode("test"):
            return COMMANDS[args.command](args, out)
    except (ContractViolation, argparse.ArgumentTypeError) as exc:
        print(f"evodhm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"evodhm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError, KeyError, ValueError) as exc:
        print(f"evodhm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":                                # pragma: no cover
    sys.exit(main())
