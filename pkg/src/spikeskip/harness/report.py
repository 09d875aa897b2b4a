"""Cross-run comparison: best-so-far bands and a baseline-vs-optimized table."""

from __future__ import annotations

import csv
import io
import math
import statistics
from pathlib import Path

from ..bosearch import best_so_far, read_history
from .experiments import read_summary, verify_summary

CURVE_HEADER = ["kind", "trial", "n_runs", "mean", "std"]
TABLE_HEADER = [
    "run", "kind", "seed", "best_assignment", "baseline_accuracy", "optimized_accuracy",
    "baseline_firing_rate", "optimized_firing_rate", "best_f",
]


def _num(text: str | None) -> str:
    if text is None or text in ("", "none", "nan"):
        return ""
    return f"{float(text):.6f}"


def band(curves: list[list[float]]) -> list[tuple[int, int, float, float]]:
    """Per trial index: ``(trial, runs, mean, sample std)`` over runs long enough to have it."""
    out = []
    longest = max((len(c) for c in curves), default=0)
    for t in range(longest):
        vals = [c[t] for c in curves if len(c) > t]
        mean = statistics.fmean(vals)
        std = statistics.stdev(vals) if len(vals) > 1 else 0.0
        out.append((t + 1, len(vals), mean, std))
    return out


def emit_report(run_dirs, out_dir=None) -> dict[str, str]:
    """Build the curves and summary table for ``run_dirs``.

    Returns ``{"curves": csv_text, "table": csv_text}`` and writes
    ``report_curves.csv`` / ``report_table.csv`` into ``out_dir`` when given.
    Each run's summary is re-checked against its history first.
    """
    groups: dict[str, list[list[float]]] = {}
    table_rows = []
    for d in sorted(Path(p) for p in run_dirs):
        history = read_history(d / "history.txt")
        summary = read_summary(d / "summary.txt")
        verify_summary(summary, history)
        kind = summary.get("kind", "unknown")
        groups.setdefault(kind, []).append(best_so_far(history))
        table_rows.append([
            d.name, kind, summary.get("seed", ""), summary.get("best_assignment", ""),
            _num(summary.get("baseline_test_accuracy")), _num(summary.get("optimized_test_accuracy")),
            _num(summary.get("baseline_firing_rate")), _num(summary.get("optimized_test_firing_rate")),
            _num(summary.get("best_f")),
        ])

    curves = io.StringIO()
    w = csv.writer(curves, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for kind in sorted(groups):
        for trial, n, mean, std in band(groups[kind]):
            w.writerow([kind, trial, n, f"{mean:.6f}" if math.isfinite(mean) else repr(mean), f"{std:.6f}"])

    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(TABLE_HEADER)
    w.writerows(table_rows)

    result = {"curves": curves.getvalue(), "table": table.getvalue()}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report_curves.csv").write_text(result["curves"], encoding="utf-8")
        (out / "report_table.csv").write_text(result["table"], encoding="utf-8")
    return result


def format_table(table_csv: str) -> str:
    """Fixed-width rendering of a CSV table for terminal output."""
    rows = list(csv.reader(io.StringIO(table_csv)))
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows if i < len(r)) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)
