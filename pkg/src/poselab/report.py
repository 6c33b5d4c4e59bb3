"""Comparison tables, convergence-curve records, and rendered figures.

``render_table`` emits the three-row configuration comparison (one column per
included joint group plus Average, one decimal place). ``emit_curves`` writes
per-epoch (config, epoch, accuracy, learning rate) records for external
plotting, and the plot_* helpers render the same data to PNG files.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .keypoints import GROUP_ORDER


class ReportError(ValueError):
    pass


def _common_groups(reports):
    group_sets = {label: tuple(r.included_groups()) for label, r in reports.items()}
    values = set(group_sets.values())
    if len(values) > 1:
        detail = "; ".join(f"{k}: {list(v)}" for k, v in group_sets.items())
        raise ReportError(f"reports disagree on joint groups: {detail}")
    groups = next(iter(values))
    return [g for g in GROUP_ORDER if g in groups]


def table_rows(reports):
    """(header, rows) for the comparison table; scores formatted to 1 decimal."""
    if not reports:
        raise ReportError("no reports to tabulate")
    groups = _common_groups(reports)
    header = ["Configuration"] + groups + ["Average"]
    rows = []
    for label, report in reports.items():
        row = [label]
        for g in groups:
            row.append(f"{report.group_scores[g]:.1f}")
        row.append(f"{report.average:.1f}" if report.average is not None else "n/a")
        rows.append(row)
    return header, rows


def render_table(reports):
    """Aligned plain-text comparison table."""
    header, rows = table_rows(reports)
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = []
    for r in [header] + rows:
        lines.append("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def table_csv(reports):
    header, rows = table_rows(reports)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def emit_curves(histories):
    """Flatten histories into (config, epoch, val_accuracy, learning_rate) rows."""
    records = []
    for label, history in histories.items():
        for rec in history.records:
            records.append({
                "config": label,
                "epoch": rec["epoch"],
                "val_accuracy": rec["val_accuracy"],
                "learning_rate": rec["learning_rate"],
            })
    return records


def curves_csv(histories):
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["config", "epoch", "val_accuracy", "learning_rate"],
        lineterminator="\n")
    writer.writeheader()
    for row in emit_curves(histories):
        writer.writerow(row)
    return buf.getvalue()


def parse_curves_csv(text):
    records = []
    for row in csv.DictReader(io.StringIO(text)):
        records.append({
            "config": row["config"],
            "epoch": int(row["epoch"]),
            "val_accuracy": float(row["val_accuracy"]),
            "learning_rate": float(row["learning_rate"]),
        })
    return records


# --- figures ---------------------------------------------------------------------


def plot_curves(histories, path):
    """Validation accuracy vs epoch, one line per configuration."""
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    for label, history in histories.items():
        ax.plot(history.epochs(), history.accuracies(), marker="o", markersize=3,
                label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation accuracy (PCK, %)")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def plot_group_bars(reports, path):
    """Grouped bar chart of per-group scores for each configuration."""
    groups = _common_groups(reports)
    labels = list(reports.keys())
    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * max(3, len(groups)), 4.0))
    width = 0.8 / max(1, len(labels))
    for i, label in enumerate(labels):
        xs = [g_i + i * width for g_i in range(len(groups))]
        ys = [reports[label].group_scores[g] for g in groups]
        ax.bar(xs, ys, width=width, label=label)
    ax.set_xticks([g_i + width * (len(labels) - 1) / 2 for g_i in range(len(groups))])
    ax.set_xticklabels(groups)
    ax.set_ylabel("score (%)")
    ax.set_ylim(0, 100)
    ax.legend()
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path
