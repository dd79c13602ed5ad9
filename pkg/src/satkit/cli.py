"""Command-line entry point: ``satkit <command> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError, MissingArtifact
from .phantom import default_corpus, write_corpus
from .pipeline import BASELINES, RunConfig, cmd_eval, cmd_harmonize, cmd_report, cmd_sample_plan, cmd_split

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2

log = logging.getLogger("satkit")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, help="worker processes (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="satkit", description="Harmonize, sample and evaluate 3D segmentation corpora.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", parents=[common], help="write the synthetic phantom corpus")
    s.add_argument("out", type=Path)

    s = sub.add_parser("harmonize", parents=[common], help="preprocess scans listed in dataset manifests")
    s.add_argument("manifests", nargs="+", type=Path)
    s.add_argument("--store", type=Path, required=True)

    s = sub.add_parser("split", parents=[common], help="patient-level train/test split")
    s.add_argument("--store", type=Path, required=True)
    s.add_argument("--ratio", type=float)

    s = sub.add_parser("sample-plan", parents=[common], help="dataset-balanced sampling plan")
    s.add_argument("--store", type=Path, required=True)
    s.add_argument("--oversample-prob", type=float)

    s = sub.add_parser("eval", parents=[common], help="score predictions or a baseline")
    s.add_argument("--store", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    src = s.add_mutually_exclusive_group()
    src.add_argument("--predictions", type=Path, help="directory laid out as <dataset>/<scan>/<term>.nii.gz")
    src.add_argument("--baseline", choices=BASELINES, default="ground-truth")
    s.add_argument("--subset", choices=("all", "Train", "Test"), default="all")
    tol = s.add_mutually_exclusive_group()
    tol.add_argument("--tau-mm", type=float)
    tol.add_argument("--tau-voxels", type=float)

    s = sub.add_parser("report", parents=[common], help="aggregate eval records into tables")
    s.add_argument("--store", type=Path, required=True)
    s.add_argument("--eval", dest="eval_dir", type=Path, required=True)
    s.add_argument("--out", type=Path, required=True)
    return p


def _config(args) -> RunConfig:
    return RunConfig.load(
        args.config,
        seed=args.seed,
        jobs=args.jobs,
        ratio=getattr(args, "ratio", None),
        oversample_prob=getattr(args, "oversample_prob", None),
        tau_mm=getattr(args, "tau_mm", None),
        tau_voxels=getattr(args, "tau_voxels", None),
    )


def _run(args) -> int:
    config = _config(args)
    if args.command == "phantom":
        for path in write_corpus(args.out, default_corpus(config.seed)):
            print(path)
        return EXIT_OK
    if args.command == "harmonize":
        summary = cmd_harmonize(args.manifests, args.store, config)
        for f in summary["failures"]:
            log.warning("%s/%s: %s: %s", f["dataset"], f["scan"], f["error"], f["message"])
        print(f"harmonized {len(summary['scans'])} scans, {len(summary['failures'])} failures")
        return EXIT_PARTIAL if summary["failures"] else EXIT_OK
    if args.command == "split":
        sides = cmd_split(args.store, config)["assignment"]
        n_train = sum(v == "Train" for v in sides.values())
        print(f"split {len(sides)} scans: {n_train} train, {len(sides) - n_train} test")
        return EXIT_OK
    if args.command == "sample-plan":
        doc = cmd_sample_plan(args.store, config)
        print(f"sample plan over {len(doc['plan']['entries'])} training scans")
        return EXIT_OK
    if args.command == "eval":
        doc = cmd_eval(args.store, args.out, config, args.baseline, args.predictions, args.subset)
        for f in doc["failures"]:
            log.warning("%s/%s %s: %s", f["dataset"], f["scan"], f["class"], f["message"])
        print(f"{doc['records']} records, {len(doc['failures'])} failures")
        return EXIT_PARTIAL if doc["failures"] else EXIT_OK
    if args.command == "report":
        report = cmd_report(args.store, args.eval_dir, args.out, config)
        if "All" in report.regions:
            a = report.regions["All"]
            print(f"All: DSC {a.dsc:.4f} NSD {a.nsd:.4f} over {a.count} records")
        return EXIT_OK
    raise ConfigError(f"unknown command {args.command}")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _run(args)
    except (ConfigError, MissingArtifact) as exc:
        print(f"satkit: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
