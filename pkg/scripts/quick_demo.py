#!/usr/bin/env python3
"""Minutes-scale demo: tiny dataset, short DeepAll vs TriD comparison.

Generates a 3-domain synthetic dataset, trains both methods under the
leave-one-domain-out protocol for a handful of epochs, and writes a
comparison table plus chart. Intended as a smoke-scale tour, not a
benchmark; see reproduce_trends.py for the full desk-scale runs.
"""

from __future__ import annotations

import argparse
import dataclasses
import time
from pathlib import Path

from stylerand.harness import run_experiment, standard_config
from stylerand.report import build_comparison
from stylerand.segnet import NetworkConfig, TrainSchedule
from stylerand.synthdata import generate_dataset, load_dataset


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="build/demo", help="output directory")
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    wd = Path(args.workdir)
    data_dir = wd / "data"
    if not (data_dir / "manifest.json").exists():
        print("generating 3-domain demo dataset (20 samples each) ...")
        generate_dataset(K=3, per_domain=20, seed=7, out_path=data_dir, image_size=64)
    dataset = load_dataset(data_dir)

    base = standard_config(seeds=(args.seed,), dataset="data")
    base = dataclasses.replace(
        base,
        network=NetworkConfig(stage_widths=(8, 16, 32, 64), blocks_per_stage=2),
        schedule=TrainSchedule(l0=0.01, T=args.epochs, momentum=0.99, batch_size=8),
    )

    for name, operator in [("deepall", "none"), ("trid", "trid")]:
        cfg = dataclasses.replace(
            base,
            operator=dataclasses.replace(base.operator, operator=operator),
            output=f"runs/{name}",
        )
        t0 = time.time()
        report, failures = run_experiment(cfg, wd, dataset=dataset)
        assert report is not None and not failures, failures
        pooled = report.pooled
        asd_text = "n/a" if pooled["asd"] is None else f"{pooled['asd']:.3f}"
        print(
            f"{name:8s} {time.time() - t0:5.1f}s  pooled DSC {pooled['dsc']:.4f}  "
            f"ASD {asd_text}  ({pooled['asd_failures']} undefined surfaces)"
        )

    summary = build_comparison([wd / "runs/deepall", wd / "runs/trid"], wd / "comparison")
    print(f"comparison written to {wd / 'comparison'} (runs: {', '.join(summary['runs'])})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
