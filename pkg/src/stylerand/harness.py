"""Benchmark harness: experiment configs, training loops, and protocols.

Seeding discipline: each fold owns RandomSource(seed).substream("fold", d),
which is split into independent "init", "data", and "perturb" streams. Data
ordering and initialization therefore match exactly across operators at a
fixed seed, so method comparisons are paired; only the perturbation stream
differs in how far it is consumed.

Reports avoid paths and timestamps entirely, so a rerun of the same config
against the same dataset is byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import traceback
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path

import numpy as np
import torch

from .metrics import (
    MetricEntry,
    MetricsReport,
    aggregate,
    class_regions,
    evaluate_sample,
    report_to_csv,
    report_to_json,
    summarize_samples,
)
from .segnet import (
    MomentumSGD,
    NetworkConfig,
    SegNet,
    TrainSchedule,
    build_from_checkpoint,
    build_network,
    config_from_dict,
    config_to_dict,
    dice_ce_loss,
    init_parameters,
    poly_lr,
    save_checkpoint,
)
from .style_ops import PerturbConfig, export_stats, write_stats_header
from .synthdata import LoadedDataset, Sample, load_dataset
from .tensor_core import RandomSource

PROTOCOLS = ("lodo", "intra-domain", "deepall", "single-source")

REPORT_NAME = "report.json"
REPORT_CSV_NAME = "report.csv"
CONFIG_NAME = "config.json"


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    """Everything one benchmark run depends on, minus the dataset bytes."""

    dataset: str
    protocol: str
    operator: PerturbConfig
    network: NetworkConfig
    schedule: TrainSchedule
    seeds: tuple[int, ...]
    output: str
    source_domain: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}; expected one of {PROTOCOLS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.protocol == "single-source" and self.source_domain is None:
            raise ValueError("single-source protocol requires source_domain")


def _operator_to_dict(op: PerturbConfig) -> dict:
    return {
        "operator": op.operator,
        "p": op.p,
        "alpha": op.alpha,
        "normal_params": list(op.normal_params),
    }


def _operator_from_dict(data: Mapping) -> PerturbConfig:
    return PerturbConfig(
        operator=str(data["operator"]),
        p=float(data.get("p", 0.5)),
        alpha=float(data.get("alpha", 0.1)),
        normal_params=tuple(data.get("normal_params", (0.5, 1.0))),
    )


def _schedule_to_dict(schedule: TrainSchedule) -> dict:
    return {
        "l0": schedule.l0,
        "T": schedule.T,
        "momentum": schedule.momentum,
        "batch_size": schedule.batch_size,
    }


def _schedule_from_dict(data: Mapping) -> TrainSchedule:
    return TrainSchedule(
        l0=float(data["l0"]),
        T=int(data["T"]),
        momentum=float(data.get("momentum", 0.99)),
        batch_size=int(data.get("batch_size", 8)),
    )


def experiment_to_dict(cfg: ExperimentConfig) -> dict:
    return {
        "dataset": cfg.dataset,
        "protocol": cfg.protocol,
        "operator": _operator_to_dict(cfg.operator),
        "network": config_to_dict(cfg.network),
        "schedule": _schedule_to_dict(cfg.schedule),
        "seeds": list(cfg.seeds),
        "output": cfg.output,
        "source_domain": cfg.source_domain,
    }


def experiment_from_dict(data: Mapping) -> ExperimentConfig:
    network = dict(data.get("network", {}))
    # Tolerate "res1,res2" / "res1+res2" shorthand from command-line overrides.
    points = network.get("insertion_points")
    if isinstance(points, str):
        network["insertion_points"] = [p for p in points.replace("+", ",").split(",") if p]
    defaults = config_to_dict(NetworkConfig())
    network = {**defaults, **network}
    schedule = {"l0": 0.01, "T": 40, **dict(data.get("schedule", {}))}
    source = data.get("source_domain")
    return ExperimentConfig(
        dataset=str(data["dataset"]),
        protocol=str(data.get("protocol", "lodo")),
        operator=_operator_from_dict(data.get("operator", {"operator": "none"})),
        network=config_from_dict(network),
        schedule=_schedule_from_dict(schedule),
        seeds=tuple(data.get("seeds", (0,))),
        output=str(data.get("output", "runs/run")),
        source_domain=None if source is None else int(source),
    )


def semantic_dict(cfg: ExperimentConfig) -> dict:
    """Config content that determines results; dataset identity is hashed separately."""
    full = experiment_to_dict(cfg)
    del full["dataset"]
    del full["output"]
    return full


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(semantic_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply key=value pairs with dotted paths; values parse as JSON, else string."""
    result = json.loads(json.dumps(data))  # deep copy via round trip
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = result
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return result


def load_config(path, overrides: Sequence[str] = ()) -> ExperimentConfig:
    data = json.loads(Path(path).read_text("utf-8"))
    if not isinstance(data, dict):
        raise ValueError("config file must contain a JSON object")
    return experiment_from_dict(apply_overrides(data, overrides))


def _stack(samples: Sequence[Sample]) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.from_numpy(np.stack([s.image for s in samples]))[:, None]
    masks = torch.from_numpy(np.stack([s.mask for s in samples]))
    return images.float(), masks.long()


def train_model(
    train_samples: Sequence[Sample],
    cfg: ExperimentConfig,
    fold_rng: RandomSource,
) -> SegNet:
    """Train one network; consumes the fold's init/data/perturb substreams."""
    if not train_samples:
        raise ValueError("training set is empty")
    net = build_network(cfg.network)
    init_parameters(net, fold_rng.substream("init"))
    data_rng = fold_rng.substream("data")
    perturb_rng = fold_rng.substream("perturb")
    optimizer = MomentumSGD(net.parameters(), momentum=cfg.schedule.momentum)
    images, masks = _stack(train_samples)
    n = images.shape[0]
    batch = cfg.schedule.batch_size
    net.train()
    for epoch in range(cfg.schedule.T):
        lr = poly_lr(cfg.schedule, epoch)
        order = data_rng.generator.permutation(n)
        for start in range(0, n, batch):
            idx = order[start : start + batch]
            optimizer.zero_grad()
            logits = net(images[idx], cfg.operator, mode="train", rng=perturb_rng)
            loss = dice_ce_loss(logits, masks[idx])
            if not torch.isfinite(loss):
                raise ValueError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            optimizer.step(lr)
    return net


def predict_labels(net: SegNet, samples: Sequence[Sample], batch_size: int = 8) -> np.ndarray:
    net.eval()
    images, _ = _stack(samples)
    outputs = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            logits = net(images[start : start + batch_size], None, mode="eval")
            outputs.append(logits.argmax(dim=1))
    return torch.cat(outputs).numpy()


def evaluate_domain(
    net: SegNet,
    samples: Sequence[Sample],
    num_classes: int,
    seed: int,
    fold: int,
    domain: int,
    batch_size: int = 8,
) -> list[MetricEntry]:
    regions = class_regions(num_classes)
    preds = predict_labels(net, samples, batch_size)
    per_sample = [
        evaluate_sample(preds[i], samples[i].mask, regions) for i in range(len(samples))
    ]
    return summarize_samples(seed, fold, domain, per_sample)


@dataclasses.dataclass(frozen=True)
class FoldResult:
    seed: int
    fold: int
    entries: tuple[MetricEntry, ...]
    error: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None


def _fold_rng(seed: int, fold: int) -> RandomSource:
    return RandomSource(seed).substream("fold", fold)


def _effective_operator(cfg: ExperimentConfig) -> PerturbConfig:
    # The deepall protocol is the leave-one-out split with perturbation off.
    if cfg.protocol == "deepall":
        return PerturbConfig(operator="none", p=cfg.operator.p, alpha=cfg.operator.alpha)
    return cfg.operator


def _run_lodo_fold(
    cfg: ExperimentConfig, dataset: LoadedDataset, seed: int, held_out: int
) -> tuple[SegNet, list[MetricEntry]]:
    train: list[Sample] = []
    for d in range(dataset.num_domains):
        if d != held_out:
            train.extend(dataset.split(d, "train"))
    train_cfg = dataclasses.replace(cfg, operator=_effective_operator(cfg))
    net = train_model(train, train_cfg, _fold_rng(seed, held_out))
    entries = evaluate_domain(
        net,
        dataset.split(held_out, "test"),
        dataset.num_classes,
        seed,
        fold=held_out,
        domain=held_out,
        batch_size=cfg.schedule.batch_size,
    )
    return net, entries


def _run_intra_fold(
    cfg: ExperimentConfig, dataset: LoadedDataset, seed: int, domain: int
) -> tuple[SegNet, list[MetricEntry]]:
    net = train_model(dataset.split(domain, "train"), cfg, _fold_rng(seed, domain))
    entries = evaluate_domain(
        net,
        dataset.split(domain, "test"),
        dataset.num_classes,
        seed,
        fold=domain,
        domain=domain,
        batch_size=cfg.schedule.batch_size,
    )
    return net, entries


def _run_single_source_fold(
    cfg: ExperimentConfig, dataset: LoadedDataset, seed: int, source: int
) -> tuple[SegNet, list[MetricEntry]]:
    net = train_model(dataset.split(source, "train"), cfg, _fold_rng(seed, source))
    entries: list[MetricEntry] = []
    for target in range(dataset.num_domains):
        if target == source:
            continue
        entries.extend(
            evaluate_domain(
                net,
                dataset.split(target, "test"),
                dataset.num_classes,
                seed,
                fold=source,
                domain=target,
                batch_size=cfg.schedule.batch_size,
            )
        )
    return net, entries


def iter_folds(cfg: ExperimentConfig, num_domains: int) -> list[tuple[int, int]]:
    """(seed, fold) pairs in deterministic execution order."""
    if cfg.protocol == "single-source":
        assert cfg.source_domain is not None
        if not 0 <= cfg.source_domain < num_domains:
            raise ValueError(f"source_domain {cfg.source_domain} outside 0..{num_domains - 1}")
        return [(seed, cfg.source_domain) for seed in cfg.seeds]
    return [(seed, d) for seed in cfg.seeds for d in range(num_domains)]


def run_experiment(
    cfg: ExperimentConfig, workdir, dataset: LoadedDataset | None = None
) -> tuple[MetricsReport | None, list[dict]]:
    """Run every fold of the configured protocol and write the run directory.

    A failing fold is recorded and skipped; the remaining folds still run.
    Returns the aggregated report (None when nothing succeeded) and the
    failure records.
    """
    torch.set_num_threads(1)  # keep float reductions deterministic across runs
    workdir = Path(workdir)
    if dataset is None:
        dataset = load_dataset(workdir / cfg.dataset)
    run_dir = workdir / cfg.output
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_hash = config_hash(cfg)

    runners = {
        "lodo": _run_lodo_fold,
        "deepall": _run_lodo_fold,
        "intra-domain": _run_intra_fold,
        "single-source": _run_single_source_fold,
    }
    runner = runners[cfg.protocol]

    results: list[FoldResult] = []
    for seed, fold in iter_folds(cfg, dataset.num_domains):
        try:
            net, entries = runner(cfg, dataset, seed, fold)
        except Exception as exc:  # record and move on; harness must finish
            results.append(
                FoldResult(seed=seed, fold=fold, entries=(), error=f"{type(exc).__name__}: {exc}")
            )
            traceback.print_exc()
            continue
        save_checkpoint(
            run_dir / f"ckpt_s{seed}_f{fold}.bin",
            net,
            extra={
                "seed": seed,
                "fold": fold,
                "operator": _effective_operator(cfg).operator,
                "config_hash": cfg_hash,
                "dataset_hash": dataset.dataset_hash,
            },
        )
        results.append(FoldResult(seed=seed, fold=fold, entries=tuple(entries)))

    failures = [
        {"seed": r.seed, "fold": r.fold, "error": r.error} for r in results if r.failed
    ]
    for r in results:
        fold_payload = {
            "seed": r.seed,
            "fold": r.fold,
            "error": r.error,
            "entries": [e.to_dict() for e in r.entries],
            "config_hash": cfg_hash,
            "dataset_hash": dataset.dataset_hash,
        }
        (run_dir / f"fold_s{r.seed}_f{r.fold}.json").write_text(
            json.dumps(fold_payload, sort_keys=True, indent=2) + "\n", "utf-8"
        )

    entries = [e for r in results for e in r.entries]
    metadata = {
        "config_hash": cfg_hash,
        "dataset_hash": dataset.dataset_hash,
        "protocol": cfg.protocol,
        "operator": _operator_to_dict(_effective_operator(cfg)),
        "insertion_points": sorted(cfg.network.insertion_points),
        "seeds": list(cfg.seeds),
        "failed_folds": failures,
    }
    report: MetricsReport | None = None
    if entries:
        report = aggregate(entries, metadata=metadata)
        (run_dir / REPORT_NAME).write_text(report_to_json(report), "utf-8")
        with open(run_dir / REPORT_CSV_NAME, "w", encoding="utf-8", newline="\n") as fh:
            report_to_csv(report, fh)
    else:
        payload = {"entries": [], "metadata": metadata}
        (run_dir / REPORT_NAME).write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", "utf-8"
        )
    (run_dir / CONFIG_NAME).write_text(
        json.dumps(
            {"experiment": experiment_to_dict(cfg), "config_hash": cfg_hash,
             "dataset_hash": dataset.dataset_hash},
            sort_keys=True,
            indent=2,
        )
        + "\n",
        "utf-8",
    )
    return report, failures


ABLATION_SUITES = ("sr-vs-sm", "location", "distribution", "sm-extendibility")

_LOCATION_SETS = (
    ("res1", ("res1",)),
    ("res2", ("res2",)),
    ("res12", ("res1", "res2")),
    ("res123", ("res1", "res2", "res3")),
    ("res1234", ("res1", "res2", "res3", "res4")),
)


def ablation_variants(cfg: ExperimentConfig, suite: str) -> list[tuple[str, ExperimentConfig]]:
    """Expand one suite into labeled configs sharing seeds, data, and schedule."""
    if suite not in ABLATION_SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {ABLATION_SUITES}")
    base = dataclasses.replace(cfg, protocol="lodo")

    def with_operator(label: str, operator: str) -> tuple[str, ExperimentConfig]:
        op = dataclasses.replace(base.operator, operator=operator)
        out = str(Path(base.output) / label)
        return label, dataclasses.replace(base, operator=op, output=out)

    if suite == "sr-vs-sm":
        return [
            with_operator("deepall", "none"),
            with_operator("sr-only", "sr-only"),
            with_operator("sr-mixup", "sr+mixup"),
            with_operator("trid", "trid"),
        ]
    if suite == "distribution":
        return [
            with_operator("uniform", "trid"),
            with_operator("normal", "trid-normal"),
        ]
    if suite == "sm-extendibility":
        return [
            with_operator("mixstyle", "mixstyle"),
            with_operator("mixstyle-sm", "mixstyle+sm"),
            with_operator("efdm", "efdm"),
            with_operator("efdm-sm", "efdm+sm"),
        ]
    variants = []
    trid = dataclasses.replace(base.operator, operator="trid")
    for label, points in _LOCATION_SETS:
        network = dataclasses.replace(base.network, insertion_points=frozenset(points))
        out = str(Path(base.output) / label)
        variants.append(
            (label, dataclasses.replace(base, operator=trid, network=network, output=out))
        )
    return variants


def run_ablation_suite(
    cfg: ExperimentConfig, suite: str, workdir, dataset: LoadedDataset | None = None
) -> tuple[dict, list[dict]]:
    """Run all variants of a suite and write a consolidated summary."""
    workdir = Path(workdir)
    if dataset is None:
        dataset = load_dataset(workdir / cfg.dataset)
    summary_variants: dict[str, dict] = {}
    all_failures: list[dict] = []
    for label, variant in ablation_variants(cfg, suite):
        report, failures = run_experiment(variant, workdir, dataset=dataset)
        all_failures.extend({**f, "variant": label} for f in failures)
        summary_variants[label] = {
            "operator": variant.operator.operator,
            "insertion_points": sorted(variant.network.insertion_points),
            "config_hash": config_hash(variant),
            "output": variant.output,
            "pooled": None if report is None else report.pooled,
            "failed_folds": len(failures),
        }
    summary = {
        "suite": suite,
        "dataset_hash": dataset.dataset_hash,
        "seeds": list(cfg.seeds),
        "variants": summary_variants,
    }
    suite_dir = workdir / cfg.output
    suite_dir.mkdir(parents=True, exist_ok=True)
    (suite_dir / "suite_summary.json").write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", "utf-8"
    )
    (suite_dir / "suite_summary.md").write_text(_suite_markdown(summary), "utf-8")
    return summary, all_failures


def _suite_markdown(summary: dict) -> str:
    lines = [
        f"# Ablation suite: {summary['suite']}",
        "",
        f"Dataset hash: `{summary['dataset_hash'][:16]}`; seeds: {summary['seeds']}",
        "",
        "| variant | operator | insertion | mean DSC | mean ASD | ASD failures | failed folds |",
        "|---|---|---|---|---|---|---|",
    ]
    ranked = sorted(
        summary["variants"].items(),
        key=lambda kv: -1.0 if kv[1]["pooled"] is None else kv[1]["pooled"]["dsc"],
        reverse=True,
    )
    for label, info in ranked:
        pooled = info["pooled"]
        dsc_text = "—" if pooled is None else f"{pooled['dsc']:.4f}"
        asd_text = (
            "—" if pooled is None or pooled["asd"] is None else f"{pooled['asd']:.3f}"
        )
        fails = 0 if pooled is None else pooled["asd_failures"]
        lines.append(
            f"| {label} | {info['operator']} | {'+'.join(info['insertion_points'])} "
            f"| {dsc_text} | {asd_text} | {fails} | {info['failed_folds']} |"
        )
    lines.append("")
    return "\n".join(lines)


def export_feature_stats(
    checkpoint_path,
    dataset: LoadedDataset,
    block: str,
    out_path,
    splits: Iterable[str] = ("train", "test"),
    batch_size: int = 8,
) -> int:
    """Write per-(sample, channel) feature statistics at one encoder block.

    Rows cover every sample of the requested splits in manifest order, one
    record per channel, labeled by source domain. Returns the record count.
    """
    net, _ = build_from_checkpoint(checkpoint_path)
    net.eval()
    total = 0
    with open(out_path, "w", encoding="utf-8", newline="\n") as sink:
        write_stats_header(sink)
        with torch.no_grad():
            for d in range(dataset.num_domains):
                samples: list[Sample] = []
                for part in splits:
                    samples.extend(dataset.split(d, part))
                images, _ = _stack(samples)
                offset = 0
                for start in range(0, images.shape[0], batch_size):
                    capture: dict[str, torch.Tensor] = {}
                    net(images[start : start + batch_size], None, mode="eval", capture=capture)
                    if block not in capture:
                        raise ValueError(
                            f"unknown block {block!r}; captured {sorted(capture)}"
                        )
                    records = export_stats(
                        capture[block], f"d{d}", sink=sink, sample_offset=offset
                    )
                    offset += capture[block].shape[0]
                    total += len(records)
    return total


STANDARD_DATASET = {"K": 4, "per_domain": 50, "image_size": 64, "seed": 1234}


def standard_config(
    operator: str = "trid",
    seeds: tuple[int, ...] = (0, 1, 2),
    dataset: str = "data/standard",
    output: str = "runs/run",
    protocol: str = "lodo",
    insertion_points: tuple[str, ...] = ("res1", "res2"),
) -> ExperimentConfig:
    """Benchmark defaults: 4 domains, 50 samples each, 40-epoch poly schedule."""
    return ExperimentConfig(
        dataset=dataset,
        protocol=protocol,
        operator=PerturbConfig(operator=operator),
        network=NetworkConfig(insertion_points=frozenset(insertion_points)),
        schedule=TrainSchedule(l0=0.01, T=40, momentum=0.99, batch_size=8),
        seeds=seeds,
        output=output,
    )
