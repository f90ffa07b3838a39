"""Render result grids (sources x targets) from run-ledger entries.

Cells show the metric in percent as "92.41 (92.27, 92.54)".  In the aligned
text rendering the best cell per target column is bold (**...**) and the
second best underlined (__...__); missing grid cells render as "-".
"""

from __future__ import annotations

import csv
import io
from typing import Iterable, Mapping, Sequence

from .ledger import RunLedgerEntry
from .metrics import MetricReport


def lineage_label(lineage: Sequence[Mapping]) -> str:
    """Human-readable source label from a lineage snapshot.

    Fine-tune stages belong to the target side of a run and are omitted, so
    FE and FT rows for the same source checkpoint line up.
    """
    parts = []
    for stage in lineage:
        if stage.get("stage_kind") == "finetune":
            continue
        name = stage["dataset_id"]
        if stage.get("objective") == "self_supervised_external":
            name += ":selfsup"
        parts.append(name)
    return " > ".join(parts) if parts else "scratch"


def grid_from_entries(
    entries: Iterable[RunLedgerEntry],
) -> tuple[list[str], list[str], dict[tuple[str, str], MetricReport]]:
    """Collect completed runs into (row labels, column labels, cell map).

    Rows are source labels (derived from lineage), columns target dataset
    ids; later entries for the same cell win.
    """
    cells: dict[tuple[str, str], MetricReport] = {}
    rows: list[str] = []
    cols: list[str] = []
    for entry in entries:
        if entry.status != "completed" or not entry.report:
            continue
        row = lineage_label(entry.lineage)
        col = str(entry.config.get("target_manifest_id") or entry.config.get("target_manifest"))
        if row not in rows:
            rows.append(row)
        if col not in cols:
            cols.append(col)
        cells[(row, col)] = entry.metric_report()
    return rows, cols, cells


def _ranked(cells: Mapping[tuple[str, str], MetricReport], rows: Sequence[str], col: str):
    scored = [(row, cells[(row, col)].point) for row in rows if (row, col) in cells]
    scored.sort(key=lambda rv: -rv[1])
    best = scored[0][0] if scored else None
    second = scored[1][0] if len(scored) > 1 else None
    return best, second


def render_text(
    rows: Sequence[str],
    cols: Sequence[str],
    cells: Mapping[tuple[str, str], MetricReport],
) -> str:
    table: list[list[str]] = [["source \\ target", *cols]]
    marks: dict[str, tuple[str | None, str | None]] = {c: _ranked(cells, rows, c) for c in cols}
    for row in rows:
        line = [row]
        for col in cols:
            report = cells.get((row, col))
            if report is None:
                line.append("-")
                continue
            text = report.format_percent()
            best, second = marks[col]
            if row == best:
                text = f"**{text}**"
            elif row == second:
                text = f"__{text}__"
            line.append(text)
        table.append(line)

    widths = [max(len(r[i]) for r in table) for i in range(len(table[0]))]
    lines = []
    for i, r in enumerate(table):
        lines.append("  ".join(cell.ljust(widths[j]) for j, cell in enumerate(r)).rstrip())
        if i == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def render_csv(
    rows: Sequence[str],
    cols: Sequence[str],
    cells: Mapping[tuple[str, str], MetricReport],
) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["source", *cols])
    for row in rows:
        writer.writerow(
            [row]
            + [
                cells[(row, col)].format_percent() if (row, col) in cells else "-"
                for col in cols
            ]
        )
    return buf.getvalue()
