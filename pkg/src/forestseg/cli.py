"""Command-line interface: one subcommand per pipeline stage.

Every run writes a JSON manifest next to its output (``<output>.manifest.json``,
or ``manifest.json`` inside an output directory) recording the subcommand,
all parameters, inputs, outputs, seed, tool version and wall-clock time.

Exit codes: 0 success, 1 invalid arguments or data, 2 file system errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .evaluation import (
    WiouWeights,
    ablation_report,
    confusion_matrix,
    format_key_values,
    format_table,
    metrics,
    resolve_scenarios,
    run_ablation,
)
from .forest import ForestParams, load_model, predict, save_model, train_forest
from .geometry import (
    DEFAULT_RADIUS_M,
    FULL_MASK,
    FeatureMask,
    compute_feature_table,
    read_feature_table,
    stack_tables,
    write_feature_table,
)
from .io import (
    MAGIC,
    read_channel_cloud,
    read_header,
    read_multispectral_cloud,
    write_channel_cloud,
    write_multispectral_cloud,
)
from .model import CHANNEL_ORDER, Channel
from .preprocess import HeightNormParams, MergeParams, SorParams, merge_channels, normalize_height, sor_filter
from .spectral import VegetationIndexKind, vi_separability
from .synthetic import SceneSpec, generate_scene, read_scene_config

log = logging.getLogger("forestseg")

THREADS_ENV = "FORESTSEG_THREADS"
EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0 or not np.isfinite(v):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _channel(text: str) -> Channel:
    try:
        return Channel[text.upper()]
    except KeyError:
        raise argparse.ArgumentTypeError(f"channel must be swir, nir or green, got {text}") from None


def resolve_threads(requested) -> int:
    if requested is not None:
        return requested
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            value = int(env)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if value < 1:
            raise UsageError(f"{THREADS_ENV} must be >= 1")
        return value
    return os.cpu_count() or 1


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest(out: Path, args, inputs, outputs, seconds: float) -> None:
    params = {k: _jsonable(v) for k, v in vars(args).items() if k not in ("func",)}
    manifest = {
        "subcommand": args.command,
        "parameters": params,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "seed": getattr(args, "seed", None),
        "tool_version": __version__,
        "duration_s": round(seconds, 6),
    }
    _manifest_path(out).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, Channel):
        return v.name
    return v


def _forest_params(args) -> ForestParams:
    return ForestParams(n_estimators=args.trees, max_depth=args.max_depth, max_features=args.max_features,
                        min_samples_split=args.min_samples_split, min_samples_leaf=args.min_samples_leaf,
                        class_weight=args.class_weight, seed=args.seed)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands; each returns (inputs, outputs)


def cmd_sor(args):
    channel = args.channel or read_header(args.input).channel_set[0]
    cloud = read_channel_cloud(args.input, channel)
    kept, removed = sor_filter(cloud, SorParams(args.k, args.sigma), args.threads)
    log.info("sor: kept %d, removed %d", len(kept), len(removed))
    write_channel_cloud(kept, args.out, args.format)
    return [args.input], [args.out]


def cmd_merge(args):
    clouds = [read_channel_cloud(p, ch) for p, ch in zip((args.swir, args.nir, args.green), CHANNEL_ORDER)]
    merged = merge_channels(*clouds, params=MergeParams(args.radius_m), workers=args.threads)
    write_multispectral_cloud(merged, args.out, args.format)
    return [args.swir, args.nir, args.green], [args.out]


def cmd_normalize(args):
    cloud = normalize_height(read_multispectral_cloud(args.input), HeightNormParams(args.cell_size_m))
    write_multispectral_cloud(cloud, args.out, args.format)
    return [args.input], [args.out]


def cmd_features(args):
    mask = FeatureMask.parse(args.mask) if args.mask else FULL_MASK
    tables = [compute_feature_table(read_multispectral_cloud(p), args.radius_m, mask) for p in args.input]
    write_feature_table(stack_tables(tables), args.out)
    return args.input, [args.out]


def cmd_train(args):
    model = train_forest(read_feature_table(args.features), params=_forest_params(args), threads=args.threads)
    save_model(model, args.out)
    return [args.features], [args.out]


def write_labels(path: Path, labels, scores=None) -> None:
    lines = ["# label" + ("" if scores is None else " " + " ".join(f"p{c}" for c in range(scores.shape[1])))]
    for i, lab in enumerate(labels):
        row = str(int(lab))
        if scores is not None:
            row += " " + " ".join(repr(float(v)) for v in scores[i])
        lines.append(row)
    _write_text(path, "\n".join(lines) + "\n")


def read_labels(path: Path) -> np.ndarray:
    try:
        rows = [ln.split()[0] for ln in path.read_text(encoding="utf-8").splitlines()
                if ln.strip() and not ln.startswith("#")]
        return np.array([int(v) for v in rows], dtype=np.int64)
    except ValueError as e:
        raise UsageError(f"{path}: bad label file: {e}") from e


def cmd_predict(args):
    model = load_model(args.model)
    labels, scores = predict(model, read_feature_table(args.features), return_scores=True)
    write_labels(args.out, labels, scores if args.scores else None)
    return [args.model, args.features], [args.out]


def _is_cloud_file(path: Path) -> bool:
    with open(path, "rb") as fh:
        head = fh.read(len(MAGIC))
    return head == MAGIC or head.startswith(b"# version")


def _truth_labels(path: Path) -> np.ndarray:
    if path.suffix == ".npz" or not _is_cloud_file(path):
        table = read_feature_table(path)
        if table.labels is None:
            raise UsageError(f"{path}: feature table has no labels")
        return table.labels
    cloud = read_multispectral_cloud(path)
    if cloud.labels is None:
        raise UsageError(f"{path}: cloud has no labels")
    return cloud.labels


def cmd_evaluate(args):
    truth = _truth_labels(args.truth)
    report = metrics(confusion_matrix(truth, read_labels(args.pred)), WiouWeights.parse(args.weights))
    rows = [(args.label, report)]
    _write_text(args.out, format_key_values(rows) if args.key_values else format_table(rows))
    return [args.truth, args.pred], [args.out]


def cmd_ablate(args):
    train = [read_multispectral_cloud(p) for p in args.train]
    test = [read_multispectral_cloud(p) for p in args.test]
    scenarios = args.scenarios
    if args.geometry:
        scenarios = [m.with_geometric() for _, m in resolve_scenarios(scenarios)]
    rows = run_ablation(train, test, scenarios, _forest_params(args), args.radius_m,
                        WiouWeights.parse(args.weights), args.threads)
    _write_text(args.out, ablation_report(rows, key_values=args.key_values))
    return [*args.train, *args.test], [args.out]


def cmd_synth(args):
    spec = read_scene_config(args.config) if args.config else SceneSpec()
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    args.seed = spec.seed
    scene = generate_scene(spec)
    args.out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for cloud in scene.channels:
        path = args.out / f"{cloud.channel.name.lower()}.msc"
        write_channel_cloud(cloud, path, args.format)
        outputs.append(path)
    ref = args.out / "reference.msc"
    write_multispectral_cloud(scene.reference, ref, args.format)
    return ([args.config] if args.config else []), outputs + [ref]


def cmd_vi_report(args):
    cloud = read_multispectral_cloud(args.input)
    kinds = list(VegetationIndexKind) if args.index == "all" else [VegetationIndexKind(args.index)]
    reports = [vi_separability(cloud, k) for k in kinds]
    text = "".join(r.to_text() for r in reports)
    ranking = sorted(reports, key=lambda r: -r.score)
    text += "# ranking " + " > ".join(r.kind.value for r in ranking) + "\n"
    _write_text(args.out, text)
    return [args.input], [args.out]


# ---------------------------------------------------------------------------
# parser


def _add_forest_flags(p):
    d = ForestParams()
    p.add_argument("--trees", type=_positive_int, default=d.n_estimators)
    p.add_argument("--max-depth", type=int, default=d.max_depth)
    p.add_argument("--max-features", choices=("log2", "sqrt", "all"), default=d.max_features)
    p.add_argument("--min-samples-split", type=int, default=d.min_samples_split)
    p.add_argument("--min-samples-leaf", type=_positive_int, default=d.min_samples_leaf)
    p.add_argument("--class-weight", choices=("balanced", "uniform"), default=d.class_weight)
    p.add_argument("--seed", type=int, default=d.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="forestseg", description="Multispectral LiDAR forest segmentation pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker threads (default: ${THREADS_ENV} or all cores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = dict(choices=("binary", "text"), default="binary", help="output cloud encoding")

    p = sub.add_parser("sor", help="statistical outlier removal on one channel cloud")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--channel", type=_channel, help="checked against the file header")
    p.add_argument("--k", type=_positive_int, default=SorParams().k_neighbors)
    p.add_argument("--sigma", type=_positive_float, default=SorParams().sigma_multiplier)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", **fmt)
    p.set_defaults(func=cmd_sor)

    p = sub.add_parser("merge", help="fuse SWIR, NIR and Green clouds")
    for name in ("swir", "nir", "green"):
        p.add_argument(f"--{name}", type=Path, required=True)
    p.add_argument("--radius-m", type=_positive_float, default=MergeParams().radius_m)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", **fmt)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("normalize", help="height above local terrain minimum")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--cell-size-m", type=_positive_float, default=HeightNormParams().cell_size_m)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--format", **fmt)
    p.set_defaults(func=cmd_normalize)

    p = sub.add_parser("features", help="per-point feature table (one or more plots)")
    p.add_argument("--in", dest="input", type=Path, nargs="+", required=True)
    p.add_argument("--mask", help="e.g. coords+swir+nir+green+vi+geom (default: all blocks)")
    p.add_argument("--radius-m", type=_positive_float, default=DEFAULT_RADIUS_M)
    p.add_argument("--out", type=Path, required=True, help=".npz for binary, anything else for text")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="fit a random forest on a labeled feature table")
    p.add_argument("--features", type=Path, required=True)
    _add_forest_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label a feature table with a trained model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--features", type=Path, required=True)
    p.add_argument("--scores", action="store_true", help="also write per-class scores")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--truth", type=Path, required=True, help="labeled feature table or cloud")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--weights", default="1 1 2 2 2 2", help="wIoU class weights")
    p.add_argument("--label", default="prediction", help="row name in the report")
    p.add_argument("--key-values", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="one forest per feature scenario")
    p.add_argument("--train", type=Path, nargs="+", required=True)
    p.add_argument("--test", type=Path, nargs="+", required=True)
    p.add_argument("--scenarios", nargs="+", default=["all"],
                   help="'all', scenario names, or masks such as coords+swir")
    p.add_argument("--geometry", action="store_true", help="add shape features to every scenario")
    p.add_argument("--radius-m", type=_positive_float, default=DEFAULT_RADIUS_M)
    p.add_argument("--weights", default="1 1 2 2 2 2")
    p.add_argument("--key-values", action="store_true")
    _add_forest_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="generate a labeled synthetic scene")
    p.add_argument("--config", type=Path, help="key = value scene description")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--format", **fmt)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("vi-report", help="vegetation index separability per class")
    p.add_argument("--in", dest="input", type=Path, required=True)
    p.add_argument("--index", default="all", choices=["all", *(k.value for k in VegetationIndexKind)])
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_vi_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    start = time.perf_counter()
    try:
        args.threads = resolve_threads(args.threads)
        import numba
        numba.set_num_threads(min(args.threads, numba.config.NUMBA_NUM_THREADS))
        inputs, outputs = args.func(args)
        write_manifest(args.out, args, inputs, outputs, time.perf_counter() - start)
    except OSError as e:
        print(f"forestseg {args.command}: {e}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, UsageError) as e:
        print(f"forestseg {args.command}: {e}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
