"""Cross-run comparison: per-domain tables, charts, and pooling guards.

Runs are only pooled when they were evaluated against the same dataset
bytes; mismatched dataset hashes abort the comparison rather than produce a
table that silently mixes benchmarks. Missing cells (failed or out-of-scope
folds) are marked and footnoted instead of dropped.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

from .metrics import entry_from_dict

COMPARISON_MD = "comparison.md"
COMPARISON_CSV = "comparison.csv"
COMPARISON_PNG = "comparison.png"


def load_run(run_dir) -> dict:
    """Read one run directory's report; returns entries plus metadata."""
    path = Path(run_dir) / "report.json"
    if not path.exists():
        raise ValueError(f"no report.json under {run_dir}")
    data = json.loads(path.read_text("utf-8"))
    entries = [entry_from_dict(e) for e in data.get("entries", [])]
    metadata = data["metadata"]
    return {"entries": entries, "metadata": metadata}


def _run_label(run_dir: Path, seen: set[str]) -> str:
    label = run_dir.name or str(run_dir)
    candidate = label
    counter = 2
    while candidate in seen:
        candidate = f"{label}-{counter}"
        counter += 1
    seen.add(candidate)
    return candidate


def _domain_stats(entries, domain: int | None) -> dict | None:
    selected = [e for e in entries if domain is None or e.domain == domain]
    if not selected:
        return None
    defined = [e.asd for e in selected if not math.isnan(e.asd)]
    return {
        "dsc": sum(e.dsc for e in selected) / len(selected),
        "asd": sum(defined) / len(defined) if defined else None,
        "asd_failures": sum(e.asd_failures for e in selected),
    }


def build_comparison(run_dirs, out_dir) -> dict:
    """Write comparison.md / .csv / .png for a list of run directories."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ValueError("no run directories given")
    seen: set[str] = set()
    runs = []
    for run_dir in run_dirs:
        loaded = load_run(run_dir)
        runs.append((_run_label(run_dir, seen), loaded))

    hashes = {run["metadata"]["dataset_hash"] for _, run in runs}
    if len(hashes) > 1:
        raise ValueError(
            "refusing to pool runs over different datasets: hashes "
            + ", ".join(sorted(h[:12] for h in hashes))
        )

    domains = sorted({e.domain for _, run in runs for e in run["entries"]})
    footnotes: list[str] = []
    rows = []
    for label, run in runs:
        entries = run["entries"]
        failed = run["metadata"].get("failed_folds", [])
        marked = label + ("†" if failed else "")
        if failed:
            folds = ", ".join(f"seed {f['seed']} fold {f['fold']}" for f in failed)
            footnotes.append(f"† {label}: failed folds ({folds}); table uses surviving folds only.")
        cells = {}
        for d in domains:
            stats = _domain_stats(entries, d)
            if stats is None:
                footnotes.append(f"— {label}: no entries for domain {d}.")
            cells[d] = stats
        rows.append(
            {
                "label": label,
                "marked": marked,
                "operator": run["metadata"].get("operator", {}).get("operator", "?"),
                "cells": cells,
                "overall": _domain_stats(entries, None),
            }
        )

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_markdown(out / COMPARISON_MD, rows, domains, footnotes)
    _write_csv(out / COMPARISON_CSV, rows, domains)
    _write_chart(out / COMPARISON_PNG, rows, domains)
    return {"runs": [r["label"] for r in rows], "domains": domains, "footnotes": footnotes}


def _fmt_dsc(stats) -> str:
    return "—" if stats is None else f"{stats['dsc']:.4f}"


def _fmt_asd(stats) -> str:
    if stats is None or stats["asd"] is None:
        return "—"
    return f"{stats['asd']:.3f}"


def _write_markdown(path: Path, rows, domains, footnotes) -> None:
    header = (
        "| run | operator | "
        + " | ".join(f"D{d} DSC" for d in domains)
        + " | avg DSC | avg ASD | ASD failures |"
    )
    divider = "|" + "---|" * (len(domains) + 5)
    lines = ["# Run comparison", "", header, divider]
    for row in sorted(rows, key=lambda r: -1.0 if r["overall"] is None else r["overall"]["dsc"], reverse=True):
        overall = row["overall"]
        cells = " | ".join(_fmt_dsc(row["cells"][d]) for d in domains)
        failures = "—" if overall is None else str(overall["asd_failures"])
        lines.append(
            f"| {row['marked']} | {row['operator']} | {cells} | "
            f"{_fmt_dsc(overall)} | {_fmt_asd(overall)} | {failures} |"
        )
    if footnotes:
        lines.append("")
        lines.extend(sorted(set(footnotes)))
    lines.append("")
    path.write_text("\n".join(lines), "utf-8")


def _write_csv(path: Path, rows, domains) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("run,operator,domain,dsc,asd,asd_failures\n")
        for row in rows:
            scopes = [(str(d), row["cells"][d]) for d in domains] + [("all", row["overall"])]
            for scope, stats in scopes:
                if stats is None:
                    fh.write(f"{row['label']},{row['operator']},{scope},,,\n")
                    continue
                asd_text = "" if stats["asd"] is None else f"{stats['asd']:.9g}"
                fh.write(
                    f"{row['label']},{row['operator']},{scope},{stats['dsc']:.9g},"
                    f"{asd_text},{stats['asd_failures']}\n"
                )


def _write_chart(path: Path, rows, domains) -> None:
    import matplotlib

    matplotlib.use("Agg", force=True)
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(1.8 + 1.4 * max(1, len(domains)), 4.0))
    width = 0.8 / max(1, len(rows))
    for i, row in enumerate(rows):
        xs = []
        ys = []
        for j, d in enumerate(domains):
            stats = row["cells"][d]
            if stats is None:
                continue
            xs.append(j + (i - (len(rows) - 1) / 2) * width)
            ys.append(stats["dsc"])
        ax.bar(xs, ys, width=width, label=row["label"])
    ax.set_xticks(range(len(domains)))
    ax.set_xticklabels([f"D{d}" for d in domains])
    ax.set_ylabel("mean DSC")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("Per-domain DSC by run")
    ax.legend(fontsize=8)
    fig.tight_layout()
    # Strip the software/version text chunk so rerenders are byte-stable.
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
