"""Markdown summary of an experiment directory."""

from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

REQUIRED = ("metrics.csv", "curves.csv")
METHOD_ORDER = ("bm25", "dr", "ddr", "ddr_no_df", "ddr_no_si", "ddr_no_d")


class ReportError(FileNotFoundError):
    pass


def relative_improvement(new: float, old: float) -> float | None:
    return None if old == 0 else (new - old) / old


def _read_metrics(path: Path) -> dict[str, dict[str, dict[str, float]]]:
    table: dict[str, dict[str, dict[str, float]]] = defaultdict(lambda: defaultdict(dict))
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table[row["metric"]][row["domain"]][row["method"]] = float(row["value"])
    return table


def render(results_dir: str | Path) -> str:
    results_dir = Path(results_dir)
    missing = [name for name in REQUIRED if not (results_dir / name).is_file()]
    if missing:
        raise ReportError(f"{results_dir} is missing {', '.join(missing)}")
    table = _read_metrics(results_dir / "metrics.csv")
    if not table:
        raise ReportError(f"{results_dir / 'metrics.csv'} holds no results")

    lines = ["# Retrieval results", ""]
    times_path = results_dir / "finetuning.json"
    if times_path.is_file():
        times = json.loads(times_path.read_text())
        lines += ["Supervised training runs per method: " + ", ".join(f"{m}={n}" for m, n in times.items()), ""]

    for metric in sorted(table, key=lambda m: (m.split("@")[0] != "ndcg", int(m.split("@")[1]))):
        rows = table[metric]
        methods = sorted({m for r in rows.values() for m in r}, key=lambda m: (METHOD_ORDER + (m,)).index(m))
        with_imp = "dr" in methods and "ddr" in methods
        header = ["domain", *methods] + (["imp."] if with_imp else [])
        lines += [f"## {metric}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
        for domain in rows:
            cells = [domain] + [f"{rows[domain][m]:.3f}" if m in rows[domain] else "-" for m in methods]
            if with_imp:
                imp = None
                if "dr" in rows[domain] and "ddr" in rows[domain]:
                    imp = relative_improvement(rows[domain]["ddr"], rows[domain]["dr"])
                cells.append("-" if imp is None else f"{imp:+.1%}")
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")

    lines += [
        "Adaptation curves (step vs. metric, per target domain) are in `curves.csv`;",
        "per-method TREC run files are under `runs/`.",
        "",
    ]
    return "\n".join(lines)


def write_report(results_dir: str | Path) -> Path:
    text = render(results_dir)
    path = Path(results_dir) / "report.md"
    path.write_text(text)
    return path
