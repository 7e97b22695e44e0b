"""Command-line entry point for dataset generation, benchmarks, and reports.

Exit codes: 0 on success, 1 when at least one training fold failed (the
remaining folds still ran and were reported), 2 on configuration errors
(bad JSON, unknown keys or choices, missing files).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .harness import (
    ABLATION_SUITES,
    export_feature_stats,
    load_config,
    run_ablation_suite,
    run_experiment,
)
from .report import build_comparison
from .synthdata import DEFAULT_IMAGE_SIZE, dataset_fingerprint, generate_dataset, load_dataset


class ConfigError(Exception):
    """User-facing configuration problem; maps to exit code 2."""


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stylerand",
        description="Feature-statistic randomization benchmark for 2-D segmentation.",
    )
    parser.add_argument(
        "--workdir", default=".", help="base directory for datasets and run outputs"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a multi-domain synthetic dataset")
    gen.add_argument("--out", required=True, help="output directory, relative to workdir")
    gen.add_argument("--domains", type=int, default=4)
    gen.add_argument("--per-domain", type=int, default=50)
    gen.add_argument("--image-size", type=int, default=DEFAULT_IMAGE_SIZE)
    gen.add_argument("--seed", type=int, default=1234)
    gen.add_argument("--single-class", action="store_true")
    gen.add_argument("--overwrite", action="store_true")

    def add_config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config field by dotted path (value parsed as JSON)",
        )

    add_config_args(sub.add_parser("train", help="run the protocol named in the config"))
    add_config_args(sub.add_parser("lodo", help="run the leave-one-domain-out protocol"))
    add_config_args(sub.add_parser("intra", help="run the within-domain protocol"))

    ablate = sub.add_parser("ablate", help="run one ablation suite under the lodo protocol")
    add_config_args(ablate)
    ablate.add_argument("--suite", required=True, choices=ABLATION_SUITES)

    stats = sub.add_parser("export-stats", help="dump per-channel feature statistics")
    stats.add_argument("--checkpoint", required=True)
    stats.add_argument("--dataset", required=True, help="dataset directory, relative to workdir")
    stats.add_argument("--block", default="res1")
    stats.add_argument("--out", required=True, help="output CSV, relative to workdir")
    stats.add_argument("--splits", default="train,test")

    rep = sub.add_parser("report", help="build a comparison over finished runs")
    rep.add_argument("--runs", nargs="+", required=True, help="run directories, relative to workdir")
    rep.add_argument("--out", required=True, help="output directory, relative to workdir")
    return parser


def _load(args, forced_protocol: str | None = None):
    from .harness import experiment_from_dict, experiment_to_dict

    try:
        cfg = load_config(Path(args.workdir) / args.config, args.overrides)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    if forced_protocol is not None and cfg.protocol != forced_protocol:
        data = experiment_to_dict(cfg)
        data["protocol"] = forced_protocol
        cfg = experiment_from_dict(data)
    return cfg


def _run_and_summarize(cfg, workdir) -> int:
    try:
        report, failures = run_experiment(cfg, workdir)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if report is not None:
        pooled = report.pooled
        asd_text = "n/a" if pooled["asd"] is None else f"{pooled['asd']:.3f}"
        print(
            f"{cfg.protocol}: pooled DSC {pooled['dsc']:.4f}, ASD {asd_text}, "
            f"entries {pooled['entries']}, report under {Path(workdir) / cfg.output}"
        )
    for failure in failures:
        print(
            f"fold failure: seed {failure['seed']} fold {failure['fold']}: {failure['error']}",
            file=sys.stderr,
        )
    return 1 if failures else 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    workdir = Path(args.workdir)
    try:
        if args.command == "gen-data":
            try:
                generate_dataset(
                    K=args.domains,
                    per_domain=args.per_domain,
                    seed=args.seed,
                    out_path=workdir / args.out,
                    image_size=args.image_size,
                    single_class=args.single_class,
                    overwrite=args.overwrite,
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            print(f"dataset written to {workdir / args.out}")
            print(f"fingerprint {dataset_fingerprint(workdir / args.out)}")
            return 0

        if args.command in ("train", "lodo", "intra"):
            forced = {"train": None, "lodo": "lodo", "intra": "intra-domain"}[args.command]
            cfg = _load(args, forced)
            return _run_and_summarize(cfg, workdir)

        if args.command == "ablate":
            cfg = _load(args, None)
            try:
                summary, failures = run_ablation_suite(cfg, args.suite, workdir)
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            for label, info in summary["variants"].items():
                pooled = info["pooled"]
                text = "no surviving folds" if pooled is None else f"DSC {pooled['dsc']:.4f}"
                print(f"{summary['suite']}/{label}: {text}")
            for failure in failures:
                print(
                    f"fold failure in {failure['variant']}: seed {failure['seed']} "
                    f"fold {failure['fold']}: {failure['error']}",
                    file=sys.stderr,
                )
            return 1 if failures else 0

        if args.command == "export-stats":
            try:
                dataset = load_dataset(workdir / args.dataset)
                splits = tuple(s for s in args.splits.split(",") if s)
                count = export_feature_stats(
                    workdir / args.checkpoint, dataset, args.block, workdir / args.out,
                    splits=splits,
                )
            except (ValueError, FileNotFoundError) as exc:
                raise ConfigError(str(exc)) from exc
            print(f"wrote {count} records to {workdir / args.out}")
            return 0

        if args.command == "report":
            try:
                summary = build_comparison(
                    [workdir / r for r in args.runs], workdir / args.out
                )
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc
            print(
                f"compared {len(summary['runs'])} runs over domains {summary['domains']}; "
                f"outputs under {workdir / args.out}"
            )
            return 0

        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
