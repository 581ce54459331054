"""Command-line front end: gen, segment, train, eval, bench."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .classifier import (VARIANTS, ModelDimensionError, ModelFormatError, ModelParams, load_model,
                         save_model, train)
from .cloud import CloudFormatError, export_ply, load_cloud
from .evaluate import (DILATION, ConfusionMatrix, LatencyReport, classwise_prf, edge_f1,
                       metrics_csv, metrics_table, miou)
from .features import N_BINS, feature_dim, stack, write_features
from .pipeline import PipelineParams, run_cloud
from .scene import DatasetConfig, LidarSpec, generate_dataset, load_entry, read_manifest
from .segment import DIST_THRES, THETA_THRES

log = logging.getLogger("surfseg")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_FORMAT, EXIT_MODEL = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


def _seed_default() -> int:
    env = os.environ.get("SURFSEG_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"SURFSEG_SEED must be an integer, got {env!r}") from None


def _add_pipeline_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pipeline")
    g.add_argument("--interval", type=int, default=5, metavar="K",
                   help="column subsampling interval (default: %(default)s)")
    g.add_argument("--theta-thres", type=float, default=THETA_THRES, metavar="RAD",
                   help="max normal angle between linked points, radians (default: %(default)s)")
    g.add_argument("--dist-thres", type=float, default=DIST_THRES, metavar="D",
                   help="max range-normalized link distance (default: %(default)s)")
    g.add_argument("--bins", type=int, default=N_BINS, metavar="B",
                   help="histogram bins per normal component (default: %(default)s)")


def _add_jobs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes over the manifest; output order is fixed (default: %(default)s)")


def _add_seed(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None,
                   help="random seed (default: $SURFSEG_SEED, else 0)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="surfseg", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic scan dataset and manifest", formatter_class=fmt)
    p.add_argument("out", type=Path, help="output directory")
    p.add_argument("--scenes", type=int, default=24, help="number of distinct scenes")
    p.add_argument("--clouds", type=int, default=289, help="total clouds (shifted scans of the scenes)")
    p.add_argument("--shift-step", type=float, default=1.5, help="lidar shift spacing in metres")
    p.add_argument("--noise", type=float, default=0.1, help="range noise sigma in metres")
    p.add_argument("--no-mirror", action="store_true", help="skip x4 mirror augmentation of training clouds")
    _add_seed(p)

    p = sub.add_parser("segment", help="segment one cloud; optionally classify and export PLY",
                       formatter_class=fmt)
    p.add_argument("cloud", type=Path, help="input cloud file (.slc or .slc.gz)")
    p.add_argument("out", type=Path, help="output directory")
    p.add_argument("--model", type=Path, default=None, help="trained model for semantic classes")
    p.add_argument("--ply", action="store_true", help="also write a coloured PLY (needs --model)")
    _add_pipeline_flags(p)

    p = sub.add_parser("train", help="train a classifier on the manifest's train split",
                       formatter_class=fmt)
    p.add_argument("manifest", type=Path, help="dataset manifest")
    p.add_argument("model", type=Path, help="output model file (.gz suffix compresses)")
    p.add_argument("--classifier", choices=VARIANTS, default="ert", help="classifier variant")
    p.add_argument("--trees", type=int, default=100, help="trees per forest")
    p.add_argument("--min-leaf", type=int, default=2, help="minimum samples per leaf")
    p.add_argument("--max-depth", type=int, default=None, help="maximum tree depth (default: unlimited)")
    p.add_argument("--knn-k", type=int, default=5, help="neighbours for the knn classifier")
    p.add_argument("--report", type=Path, default=None, help="write validation metrics CSV here")
    _add_seed(p)
    _add_pipeline_flags(p)
    _add_jobs(p)

    p = sub.add_parser("eval", help="evaluate a model (and segment edges) on a manifest split",
                       formatter_class=fmt)
    p.add_argument("manifest", type=Path, help="dataset manifest")
    p.add_argument("model", type=Path, help="trained model")
    p.add_argument("out", type=Path, help="metrics CSV output")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to evaluate")
    p.add_argument("--dilate", type=int, default=DILATION, help="edge dilation radius in cells")
    p.add_argument("--edges", type=Path, default=None, help="also write edge precision/recall/F1 CSV")
    _add_pipeline_flags(p)
    _add_jobs(p)

    p = sub.add_parser("bench", help="per-stage latency over a manifest split", formatter_class=fmt)
    p.add_argument("manifest", type=Path, help="dataset manifest")
    p.add_argument("out", type=Path, help="latency CSV output")
    p.add_argument("--model", type=Path, default=None, help="include the predict stage with this model")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="split to time")
    p.add_argument("--limit", type=int, default=10, help="max clouds to time")
    p.add_argument("--repetitions", type=int, default=3, help="timed passes over the clouds")
    p.add_argument("--warmup", type=int, default=1, help="discarded warm-up runs")
    _add_pipeline_flags(p)
    return parser


def _pipeline_params(args) -> PipelineParams:
    if args.interval < 1:
        raise UsageError("--interval must be >= 1")
    if args.bins < 1:
        raise UsageError("--bins must be >= 1")
    if not (args.theta_thres >= 0 and args.dist_thres > 0):
        raise UsageError("thresholds must be positive")
    return PipelineParams(args.interval, args.theta_thres, args.dist_thres, args.bins)


def _entries(manifest: Path, split: str):
    entries = [e for e in read_manifest(manifest) if e.split == split]
    if not entries:
        raise UsageError(f"manifest has no {split!r} entries")
    return entries


def _parallel_map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs < 1:
        raise UsageError("--jobs must be >= 1")
    if jobs == 1 or len(items) < 2:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * jobs))))


class _Features:
    def __init__(self, root: Path, params: PipelineParams):
        self.root, self.params = root, params

    def __call__(self, entry):
        res = run_cloud(load_entry(entry, self.root), self.params, with_gt=True)
        return stack(res.features, self.params.bins)


class _Evaluate:
    def __init__(self, root: Path, params: PipelineParams, model, radius: int):
        self.root, self.params, self.model, self.radius = root, params, model, radius

    def __call__(self, entry):
        cloud = load_entry(entry, self.root)
        res = run_cloud(cloud, self.params, self.model)
        cm = ConfusionMatrix.from_labels(res.classes[cloud.valid], cloud.gt_class[cloud.valid])
        e = edge_f1(res.dense.labels, cloud.gt_instance, cloud.valid, self.radius)
        return cm, (e.precision, e.recall, e.f1)


def _check_dim(model, params: PipelineParams) -> None:
    if model.dim != feature_dim(params.bins):
        raise ModelDimensionError(
            f"model expects {model.dim} features but --bins {params.bins} gives {feature_dim(params.bins)}")


def _confusion(manifest: Path, split: str, model, params: PipelineParams, radius: int, jobs: int):
    entries = _entries(manifest, split)
    parts = _parallel_map(_Evaluate(manifest.parent, params, model, radius), entries, jobs)
    cm = ConfusionMatrix()
    for c, _ in parts:
        cm = cm + c
    return cm, np.array([e for _, e in parts])


def cmd_gen(args) -> None:
    lidar = replace(LidarSpec(), noise_sigma=args.noise)
    cfg = DatasetConfig(n_scenes=args.scenes, n_clouds=args.clouds, shift_step=args.shift_step,
                        seed=args.seed, lidar=lidar, mirror_train=not args.no_mirror)
    try:
        lidar.validate()
        entries = generate_dataset(cfg, args.out)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    counts = {s: sum(e.split == s for e in entries) for s in ("train", "val", "test")}
    print(f"{args.out / 'manifest.txt'}: " + " ".join(f"{k}={v}" for k, v in counts.items()))


def cmd_segment(args) -> None:
    params = _pipeline_params(args)
    if args.ply and args.model is None:
        raise UsageError("--ply needs --model")
    model = None
    if args.model is not None:
        model = load_model(args.model)
        _check_dim(model, params)
    cloud = load_cloud(args.cloud)
    res = run_cloud(cloud, params, model)
    args.out.mkdir(parents=True, exist_ok=True)
    res.dense.dump(args.out / "labels.txt")
    write_features(res.features, args.out / "features.txt")
    if res.classes is not None:
        with open(args.out / "classes.txt", "w") as fh:
            for i, j in zip(*np.nonzero(cloud.valid)):
                fh.write(f"{i} {j} {int(res.classes[i, j])}\n")
    if args.ply:
        export_ply(cloud, res.classes, args.out / "cloud.ply")
    print(f"{res.dense.n_segments} segments, {len(res.features)} features, "
          f"{res.timings['total']:.1f} ms")


def cmd_train(args) -> None:
    params = _pipeline_params(args)
    if args.trees < 1 or args.min_leaf < 1 or args.knn_k < 1:
        raise UsageError("--trees, --min-leaf and --knn-k must be >= 1")
    entries = _entries(args.manifest, "train")
    parts = _parallel_map(_Features(args.manifest.parent, params), entries, args.jobs)
    X = np.concatenate([p[0] for p in parts])
    y = np.concatenate([p[1] for p in parts])
    if len(X) == 0:
        raise UsageError("training split produced no segment features")
    mp = ModelParams(n_trees=args.trees, max_depth=args.max_depth, min_leaf=args.min_leaf,
                     k=args.knn_k, seed=args.seed)
    log.info("training %s on %d features", args.classifier, len(X))
    model = train(X, y, args.classifier, mp)
    save_model(model, args.model)
    print(f"{args.model}: {args.classifier}, {len(X)} training segments")
    if any(e.split == "val" for e in read_manifest(args.manifest)):
        cm, _ = _confusion(args.manifest, "val", model, params, DILATION, args.jobs)
        report, prf = miou(confusion=cm), classwise_prf(cm)
        print("validation:")
        print(metrics_table(report, prf))
        if args.report is not None:
            args.report.write_text(metrics_csv(report, prf))


def cmd_eval(args) -> None:
    params = _pipeline_params(args)
    if args.dilate < 0:
        raise UsageError("--dilate must be >= 0")
    model = load_model(args.model)
    _check_dim(model, params)
    cm, edges = _confusion(args.manifest, args.split, model, params, args.dilate, args.jobs)
    report, prf = miou(confusion=cm), classwise_prf(cm)
    args.out.write_text(metrics_csv(report, prf))
    print(metrics_table(report, prf))
    p, r, f = edges.mean(axis=0)
    print(f"edges (dilation {args.dilate}): precision {p:.3f} recall {r:.3f} f1 {f:.3f}")
    if args.edges is not None:
        args.edges.write_text("precision,recall,f1\n" + f"{p:.6f},{r:.6f},{f:.6f}\n")


def cmd_bench(args) -> None:
    params = _pipeline_params(args)
    if args.repetitions < 1 or args.warmup < 0 or args.limit < 1:
        raise UsageError("--repetitions and --limit must be >= 1, --warmup >= 0")
    model = None
    if args.model is not None:
        model = load_model(args.model)
        _check_dim(model, params)
    entries = [e for e in _entries(args.manifest, args.split) if e.mirror == "none"][:args.limit]
    clouds = [load_entry(e, args.manifest.parent) for e in entries]
    report = LatencyReport()
    for _ in range(args.warmup):
        run_cloud(clouds[0], params, model)
    for _ in range(args.repetitions):
        for c in clouds:
            report.add(run_cloud(c, params, model).timings)
    args.out.write_text(report.csv())
    print(report.table())


COMMANDS = {"gen": cmd_gen, "segment": cmd_segment, "train": cmd_train, "eval": cmd_eval,
            "bench": cmd_bench}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "seed", 0) is None:
            args.seed = _seed_default()
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"surfseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ModelDimensionError as exc:
        print(f"surfseg: model mismatch: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except (CloudFormatError, ModelFormatError, ValueError, UnicodeDecodeError) as exc:
        print(f"surfseg: format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except OSError as exc:
        print(f"surfseg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
