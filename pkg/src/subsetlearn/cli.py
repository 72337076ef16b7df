"""Command-line front door: gen, train, eval and cluster-report subcommands.

Exit codes are a stable contract: 0 success, 2 config validation problems,
3 corrupt artifact files, 4 shape or class-count mismatches, 1 anything else.
Output files are written atomically, so failures never leave partial files.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import cluster, container, pipeline
from .config import RunConfig, parse_config
from .convnet import Tap
from .errors import ConfigError, ContainerError, ShapeError
from .numkit import Rng, derive_seed

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_CONFIG = 2
EXIT_CORRUPT = 3
EXIT_MISMATCH = 4


def cmd_gen(cfg: RunConfig, out_dir: Path) -> int:
    """Generate every configured dataset and write one container per id."""
    seed = cfg.seeds[0]
    datasets = cfg.build_datasets(seed)
    for ds_id, handle in datasets.items():
        path = out_dir / f"{ds_id}.sfl"
        pipeline.save_dataset(path, handle)
        print(f"{path} crc32={container.container_checksum(path):08x}")
    return EXIT_OK


def _system_name(cfg: RunConfig) -> str:
    return f"{cfg.stage_graph().name}+subset({cfg.selector})"


def cmd_train(cfg: RunConfig, out_dir: Path, workers: int) -> int:
    """Train the full system once per seed; write bundles and a metrics CSV."""
    rows = []
    name = _system_name(cfg)
    for seed in cfg.seeds:
        datasets = cfg.build_datasets(seed)
        target = datasets[cfg.target]
        bundle = pipeline.build_system(
            target,
            graph=cfg.stage_graph(),
            extra_datasets=datasets,
            config=cfg.system_config(seed),
            workers=workers,
        )
        metrics = pipeline.evaluate(bundle, target, "test")
        bundle_path = out_dir / f"bundle-seed{seed}.sfl"
        pipeline.save_bundle(bundle_path, bundle)
        rows.append((name, seed, metrics.mean_accuracy, metrics.overall_accuracy))
        print(f"{bundle_path} seed={seed} mean_accuracy={metrics.mean_accuracy!r}")
    metrics_path = out_dir / "metrics.csv"
    pipeline.write_metrics_csv(metrics_path, rows)
    print(f"{metrics_path}")
    return EXIT_OK


def cmd_eval(bundle_path: Path, dataset_path: Path, out_dir: Path) -> int:
    """Load a bundle and a dataset, evaluate the test split, write CSVs."""
    bundle = pipeline.load_bundle(bundle_path)
    dataset = pipeline.load_dataset(dataset_path)
    metrics = pipeline.evaluate(bundle, dataset, "test")
    name = f"{bundle.provenance.get('graph', 'unknown')}+subset({bundle.provenance.get('selector', '?')})"
    seed = int(bundle.provenance.get("seed", -1))
    pipeline.write_metrics_csv(
        out_dir / "metrics.csv", [(name, seed, metrics.mean_accuracy, metrics.overall_accuracy)]
    )
    pipeline.write_confusion_csv(out_dir / "confusion.csv", metrics.confusion, dataset.class_names)
    print(f"mean_accuracy={metrics.mean_accuracy!r}")
    return EXIT_OK


def cmd_cluster_report(cfg: RunConfig, out_dir: Path) -> int:
    """Pre-cluster the target under each feature tap and write the comparison CSV.

    Rows: raw conv tap, raw penultimate fc tap, and lda-projected fc tap, each
    with its silhouette and cluster-size extremes.
    """
    seed = cfg.seeds[0]
    datasets = cfg.build_datasets(seed)
    target = datasets[cfg.target]
    system = cfg.system_config(seed)
    stage = pipeline.run_stage_graph(cfg.stage_graph(), datasets, system.train)
    rows = target.rows("train")
    images, labels = target.images[rows], target.labels[rows]
    conv_feats = pipeline.extract_features(stage.net, images, Tap.CONV_LAST)
    fc_feats = pipeline.extract_features(stage.net, images, Tap.FC_PENULTIMATE)
    out_dim = system.lda_out_dim if system.lda_out_dim is not None else min(target.n_classes - 1, 32)
    lda = cluster.lda_fit(fc_feats, labels, out_dim=out_dim)
    reports = []
    for tap_name, feats, lda_model in (
        (Tap.CONV_LAST.value, conv_feats, None),
        (Tap.FC_PENULTIMATE.value, fc_feats, None),
        ("lda_" + Tap.FC_PENULTIMATE.value, fc_feats, lda),
    ):
        _, _, report = cluster.precluster_classes(
            feats,
            labels,
            tap_name,
            lda_model,
            cfg.k,
            Rng(derive_seed(seed, 101)),
            restarts=cfg.kmeans_restarts,
        )
        reports.append(report)
    lines = ["tap,silhouette,min_size,max_size"] + [r.csv_row() for r in reports]
    report_path = out_dir / "cluster_report.csv"
    container.atomic_write_text(report_path, "\n".join(lines) + "\n")
    for r in reports:
        print(f"{r.tap} silhouette={r.silhouette!r}")
    print(f"{report_path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="subsetlearn",
        description="Subset feature learning experiments on synthetic fine-grained benchmarks.",
    )
    parser.add_argument("--out-dir", default="out", help="directory for output files")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (1 keeps runs bit-deterministic)")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate the configured synthetic datasets")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int, default=None, help="override the configured seeds")

    train = sub.add_parser("train", help="train the full system, one run per seed")
    train.add_argument("--config", required=True)
    train.add_argument("--seed", type=int, default=None, help="override the configured seeds")

    ev = sub.add_parser("eval", help="evaluate a saved bundle on a saved dataset")
    ev.add_argument("bundle")
    ev.add_argument("dataset")

    report = sub.add_parser("cluster-report", help="compare pre-clustering quality across feature taps")
    report.add_argument("--config", required=True)
    report.add_argument("--seed", type=int, default=None, help="override the configured seeds")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.WARNING, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    out_dir = Path(args.out_dir)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        out_dir.mkdir(parents=True, exist_ok=True)
        if args.command == "gen":
            return cmd_gen(parse_config(args.config, args.seed), out_dir)
        if args.command == "train":
            return cmd_train(parse_config(args.config, args.seed), out_dir, args.threads)
        if args.command == "eval":
            return cmd_eval(Path(args.bundle), Path(args.dataset), out_dir)
        if args.command == "cluster-report":
            return cmd_cluster_report(parse_config(args.config, args.seed), out_dir)
        raise ConfigError(f"unknown command {args.command!r}")  # pragma: no cover
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ContainerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except Exception as exc:  # noqa: BLE001  stable catch-all exit contract
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
