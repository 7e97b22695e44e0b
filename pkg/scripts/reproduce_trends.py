#!/usr/bin/env python3
"""Desk-scale reproduction of the benchmark trends, one run at a time.

Generates the standard 4-domain dataset, then runs the leave-one-domain-out
benchmark for DeepAll, TriD, the SR/SM decomposition, the normal-provider
ablation, and the insertion-location sweep; finally exports early-layer
feature statistics from the DeepAll model and builds comparison tables.

Sequential CPU runtime is on the order of an hour with the default three
seeds; pass --seeds 0 for a faster single-seed pass. Finished runs are
detected via their report files and skipped, so the script can resume.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import time
from pathlib import Path

from stylerand.harness import (
    ablation_variants,
    config_hash,
    export_feature_stats,
    run_experiment,
    standard_config,
)
from stylerand.report import build_comparison
from stylerand.synthdata import dataset_fingerprint, generate_dataset, load_dataset


def run_once(cfg, wd, dataset):
    """Run one config unless its report already matches config and dataset."""
    report_path = wd / cfg.output / "report.json"
    if report_path.exists():
        meta = json.loads(report_path.read_text())["metadata"]
        if (
            meta.get("config_hash") == config_hash(cfg)
            and meta.get("dataset_hash") == dataset.dataset_hash
        ):
            print(f"  {cfg.output}: already done, skipping")
            return
    t0 = time.time()
    report, failures = run_experiment(cfg, wd, dataset=dataset)
    if failures:
        raise RuntimeError(f"{cfg.output}: failed folds {failures}")
    assert report is not None
    print(
        f"  {cfg.output}: {time.time() - t0:6.1f}s  pooled DSC {report.pooled['dsc']:.4f}"
    )


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="build/trends")
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = parser.parse_args()

    wd = Path(args.workdir)
    data_dir = wd / "data"
    if not (data_dir / "manifest.json").exists():
        print("generating standard 4-domain dataset ...")
        generate_dataset(K=4, per_domain=50, seed=1234, out_path=data_dir, image_size=64)
    print(f"dataset fingerprint {dataset_fingerprint(data_dir)[:16]}")
    dataset = load_dataset(data_dir)
    seeds = tuple(args.seeds)

    print("operator comparison (leave-one-domain-out):")
    operators = ["none", "sr-only", "sr+mixup", "trid", "trid-normal"]
    for operator in operators:
        label = operator.replace("+", "-")
        cfg = standard_config(
            operator=operator, seeds=seeds, dataset="data", output=f"runs/{label}"
        )
        run_once(cfg, wd, dataset)

    print("insertion-location sweep (first seed only):")
    base = standard_config(seeds=seeds[:1], dataset="data", output="runs/location")
    for label, variant in ablation_variants(base, "location"):
        run_once(variant, wd, dataset)

    print("exporting DeepAll feature statistics at res1 ...")
    ckpt = wd / f"runs/none/ckpt_s{seeds[0]}_f0.bin"
    count = export_feature_stats(ckpt, dataset, "res1", wd / "deepall_res1_stats.csv")
    print(f"  {count} records -> {wd / 'deepall_res1_stats.csv'}")

    run_dirs = [wd / f"runs/{op.replace('+', '-')}" for op in operators]
    summary = build_comparison(run_dirs, wd / "comparison")
    print(f"operator comparison table -> {wd / 'comparison'} ({len(summary['runs'])} runs)")
    loc_dirs = [wd / "runs/location" / label for label, _ in ablation_variants(base, "location")]
    build_comparison(loc_dirs, wd / "comparison-location")
    print(f"location comparison table -> {wd / 'comparison-location'}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
