"""Segmentation metrics with brute-force-verifiable definitions.

DSC is the plain overlap ratio. ASD extracts boundary pixels under
4-connectivity (the image edge counts as background), then averages the two
directed mean nearest-neighbor Euclidean distances. An empty mask makes ASD
undefined; it is reported as NaN, excluded from averages, and counted in a
failure column rather than silently dropped.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Iterable, Mapping
from typing import IO

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

_CROSS = ndimage.generate_binary_structure(2, 1)

CLASS_SEMANTICS = "class 1 = outer region including the inner (label union {1,2}); class 2 = inner region (label 2)"


def class_regions(num_classes: int) -> dict[int, tuple[int, ...]]:
    """Map evaluation classes to the label sets forming their binary regions."""
    if num_classes == 3:
        return {1: (1, 2), 2: (2,)}
    if num_classes == 2:
        return {1: (1,)}
    raise ValueError("only the 2-class and 3-class label schemes are supported")


def _as_bool(mask: np.ndarray) -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError("masks must be two-dimensional")
    return arr.astype(bool)


def dsc(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P|+|G|); two empty masks agree perfectly by convention."""
    p = _as_bool(pred)
    g = _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """Coordinates of foreground pixels with a 4-neighbor background or edge."""
    m = _as_bool(mask)
    if not m.any():
        return np.zeros((0, 2), dtype=np.int64)
    interior = ndimage.binary_erosion(m, structure=_CROSS, border_value=0)
    return np.argwhere(m & ~interior)


def asd(pred: np.ndarray, gt: np.ndarray) -> float:
    """Symmetric average of directed mean boundary distances, NaN if undefined."""
    p = _as_bool(pred)
    g = _as_bool(gt)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
    if not p.any() or not g.any():
        return float("nan")
    bp = boundary_points(p).astype(np.float64)
    bg = boundary_points(g).astype(np.float64)
    d_pg = cKDTree(bg).query(bp)[0].mean()
    d_gp = cKDTree(bp).query(bg)[0].mean()
    return float((d_pg + d_gp) / 2.0)


def evaluate_sample(
    pred_labels: np.ndarray, gt_labels: np.ndarray, regions: Mapping[int, tuple[int, ...]]
) -> dict[int, tuple[float, float]]:
    """Per-class (dsc, asd) for one labeled prediction against its ground truth."""
    results: dict[int, tuple[float, float]] = {}
    for class_id, labels in regions.items():
        p = np.isin(pred_labels, labels)
        g = np.isin(gt_labels, labels)
        results[class_id] = (dsc(p, g), asd(p, g))
    return results


@dataclasses.dataclass(frozen=True)
class MetricEntry:
    """Aggregated scores of one (seed, fold, domain, class) cell."""

    seed: int
    fold: int
    domain: int
    class_id: int
    dsc: float
    asd: float
    asd_failures: int = 0
    n_samples: int = 1

    def sort_key(self) -> tuple:
        return (self.seed, self.fold, self.domain, self.class_id)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "fold": self.fold,
            "domain": self.domain,
            "class_id": self.class_id,
            "dsc": self.dsc,
            "asd": None if math.isnan(self.asd) else self.asd,
            "asd_failures": self.asd_failures,
            "n_samples": self.n_samples,
        }


def entry_from_dict(data: Mapping) -> MetricEntry:
    return MetricEntry(
        seed=int(data["seed"]),
        fold=int(data["fold"]),
        domain=int(data["domain"]),
        class_id=int(data["class_id"]),
        dsc=float(data["dsc"]),
        asd=float("nan") if data["asd"] is None else float(data["asd"]),
        asd_failures=int(data["asd_failures"]),
        n_samples=int(data["n_samples"]),
    )


def summarize_samples(
    seed: int,
    fold: int,
    domain: int,
    per_sample: list[dict[int, tuple[float, float]]],
) -> list[MetricEntry]:
    """Collapse per-sample scores of one evaluation domain into entries."""
    if not per_sample:
        raise ValueError("no samples to summarize")
    entries = []
    for class_id in sorted(per_sample[0]):
        dscs = [scores[class_id][0] for scores in per_sample]
        asds = [scores[class_id][1] for scores in per_sample]
        defined = [a for a in asds if not math.isnan(a)]
        entries.append(
            MetricEntry(
                seed=seed,
                fold=fold,
                domain=domain,
                class_id=class_id,
                dsc=float(sum(dscs) / len(dscs)),
                asd=float(sum(defined) / len(defined)) if defined else float("nan"),
                asd_failures=len(asds) - len(defined),
                n_samples=len(per_sample),
            )
        )
    return entries


def _mean_block(entries: list[MetricEntry]) -> dict:
    dsc_mean = sum(e.dsc for e in entries) / len(entries)
    defined = [e.asd for e in entries if not math.isnan(e.asd)]
    return {
        "dsc": dsc_mean,
        "asd": sum(defined) / len(defined) if defined else None,
        "asd_failures": sum(e.asd_failures for e in entries),
        "entries": len(entries),
    }


@dataclasses.dataclass
class MetricsReport:
    """Sorted entries plus aggregates recomputable from them exactly."""

    entries: tuple[MetricEntry, ...]
    per_domain: dict[int, dict[int, dict]]
    per_class: dict[int, dict]
    pooled: dict
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "entries": [e.to_dict() for e in self.entries],
            "per_domain": {
                str(d): {str(c): block for c, block in classes.items()}
                for d, classes in self.per_domain.items()
            },
            "per_class": {str(c): block for c, block in self.per_class.items()},
            "pooled": self.pooled,
            "metadata": self.metadata,
        }


def aggregate(entries: Iterable[MetricEntry], metadata: Mapping | None = None) -> MetricsReport:
    """Pool entries into per-domain, per-class, and grand averages.

    Entries are first put into a canonical order, so any permutation of the
    same entries produces an identical report. The pooled average is the
    plain mean over all (seed, fold, domain, class) cells, matching the
    single-column table convention; per-class averages are also emitted.
    """
    ordered = tuple(sorted(entries, key=MetricEntry.sort_key))
    if not ordered:
        raise ValueError("cannot aggregate zero entries")
    per_domain: dict[int, dict[int, dict]] = {}
    for domain in sorted({e.domain for e in ordered}):
        domain_entries = [e for e in ordered if e.domain == domain]
        per_domain[domain] = {
            class_id: _mean_block([e for e in domain_entries if e.class_id == class_id])
            for class_id in sorted({e.class_id for e in domain_entries})
        }
    per_class = {
        class_id: _mean_block([e for e in ordered if e.class_id == class_id])
        for class_id in sorted({e.class_id for e in ordered})
    }
    pooled = _mean_block(list(ordered))
    meta = {"class_semantics": CLASS_SEMANTICS}
    meta.update(dict(metadata or {}))
    return MetricsReport(
        entries=ordered,
        per_domain=per_domain,
        per_class=per_class,
        pooled=pooled,
        metadata=meta,
    )


def report_to_json(report: MetricsReport) -> str:
    """Canonical serialization: sorted keys, two-space indent, no NaN tokens."""
    return json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> MetricsReport:
    data = json.loads(text)
    entries = [entry_from_dict(e) for e in data["entries"]]
    report = aggregate(entries, metadata=data["metadata"])
    return report


REPORT_CSV_HEADER = "seed,fold,domain,class_id,dsc,asd,asd_failures,n_samples"


def report_to_csv(report: MetricsReport, sink: IO[str]) -> None:
    """Flat per-entry export, one row per (seed, fold, domain, class) cell."""
    sink.write(REPORT_CSV_HEADER + "\n")
    for e in report.entries:
        asd_text = "" if math.isnan(e.asd) else f"{e.asd:.9g}"
        sink.write(
            f"{e.seed},{e.fold},{e.domain},{e.class_id},{e.dsc:.9g},{asd_text},"
            f"{e.asd_failures},{e.n_samples}\n"
        )
