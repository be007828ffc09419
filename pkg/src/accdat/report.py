"""Rendering of evaluation reports: delimited text tables, JSON, figures.

The text table mirrors the per-accent WER layout with weighted-average
columns; a grouped bar chart of the same numbers is rendered to PNG next to
the table so regime comparisons can be eyeballed directly.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .ctc import EvalReport
from .errors import InvalidArgument


def _columns(reports: list[tuple[str, EvalReport]]) -> tuple[list[int], list[str]]:
    accents = sorted({s.accent_id for _, rep in reports for s in rep.per_accent})
    avg_names: list[str] = []
    for _, rep in reports:
        for name in rep.averages:
            if name not in avg_names:
                avg_names.append(name)
    return accents, avg_names


def render_table(reports: list[tuple[str, EvalReport]]) -> str:
    """Tab-delimited WER table: one row per labelled report, percent values."""
    if not reports:
        raise InvalidArgument("no reports to render")
    accents, avg_names = _columns(reports)
    header = ["regime"] + [f"acc{a}" for a in accents] + [f"wt.{n}" for n in avg_names]
    lines = ["\t".join(header)]
    for label, rep in reports:
        by_id = {s.accent_id: s for s in rep.per_accent}
        row = [label]
        for a in accents:
            s = by_id.get(a)
            row.append(f"{s.wer * 100:.2f}" if s is not None else "-")
        for n in avg_names:
            v = rep.averages.get(n)
            row.append(f"{v * 100:.2f}" if v is not None else "-")
        lines.append("\t".join(row))
    return "\n".join(lines) + "\n"


def report_rows_json(reports: list[tuple[str, EvalReport]]) -> dict:
    """Lossless machine-readable companion to the text table."""
    return {"rows": [{"label": label, **rep.to_dict()} for label, rep in reports]}


def render_figure(reports: list[tuple[str, EvalReport]], path: Path) -> None:
    """Grouped per-accent WER bars (plus weighted averages), one group per column."""
    accents, avg_names = _columns(reports)
    columns = [f"acc{a}" for a in accents] + [f"wt.{n}" for n in avg_names]
    n_rows = len(reports)
    width = 0.8 / max(n_rows, 1)
    fig, ax = plt.subplots(figsize=(max(6.0, 1.1 * len(columns)), 4.0))
    for i, (label, rep) in enumerate(reports):
        by_id = {s.accent_id: s for s in rep.per_accent}
        vals = [by_id[a].wer * 100 if a in by_id else 0.0 for a in accents]
        vals += [rep.averages.get(n, 0.0) * 100 for n in avg_names]
        xs = [j + (i - (n_rows - 1) / 2) * width for j in range(len(columns))]
        ax.bar(xs, vals, width=width, label=label)
    ax.set_xticks(range(len(columns)))
    ax.set_xticklabels(columns, rotation=30, ha="right")
    ax.set_ylabel("WER (%)")
    ax.set_title("Word error rate by accent")
    ax.legend(fontsize=8)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_curves(metrics_files: list[tuple[str, Path]], path: Path) -> None:
    """Validation WER and discriminator accuracy curves from metrics logs."""
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.6))
    for label, mpath in metrics_files:
        records = [json.loads(line) for line in Path(mpath).read_text().splitlines()
                   if line.strip()]
        epochs = [r["epoch"] for r in records]
        wer = [r["val_wer_unseen"] for r in records]
        if any(v is not None for v in wer):
            axes[0].plot(epochs, [None if v is None else v * 100 for v in wer],
                         label=label)
        acc = [r["disc_acc"] for r in records]
        if any(v is not None for v in acc):
            axes[1].plot(epochs, acc, label=label)
    axes[0].set_xlabel("epoch")
    axes[0].set_ylabel("val WER unseen (%)")
    axes[1].set_xlabel("epoch")
    axes[1].set_ylabel("discriminator accuracy")
    for ax in axes:
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_report(reports: list[tuple[str, EvalReport]], out_path: Path,
                 figures: bool = True) -> dict[str, Path]:
    """Write table.txt + table.json (+ figure PNG); returns the output paths."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    table = render_table(reports)
    out_path.write_text(table)
    json_path = out_path.with_suffix(".json")
    json_path.write_text(json.dumps(report_rows_json(reports), sort_keys=True,
                                    separators=(",", ":")) + "\n")
    outputs = {"table": out_path, "json": json_path}
    if figures:
        fig_path = out_path.with_suffix(".png")
        render_figure(reports, fig_path)
        outputs["figure"] = fig_path
    return outputs
