"""Aligned metric tables across controller runs."""

from __future__ import annotations

import csv
import math
import os

from .scenarios import compute_metrics, read_log_csv


def _label(path) -> str:
    stem = os.path.splitext(os.path.basename(path))[0]
    return stem.replace("closed_loop_", "")


def compare_logs(paths, tau_s: float = 120.0, band: float = 0.1,
                 u_bounds=(0.05, 0.18)):
    """Per-controller metric columns from a list of log CSVs.

    Returns (row_labels, column_labels, table of floats/strings).
    """
    if not paths:
        raise ValueError("need at least one log file")
    columns = []
    metrics = []
    n_plateaus = None
    for path in paths:
        records = read_log_csv(path)
        m = compute_metrics(records, tau_s=tau_s, band=band, u_bounds=u_bounds)
        if n_plateaus is None:
            n_plateaus = len(m.plateaus)
        elif n_plateaus != len(m.plateaus):
            raise ValueError(f"{path}: plateau count differs from the first log")
        columns.append(_label(path))
        metrics.append(m)
    rows = []
    table = []
    for i in range(n_plateaus):
        rows.append(f"ss_error_K[plateau {i} @ {metrics[0].plateaus[i].y_ref:g}K]")
        table.append([m.plateaus[i].ss_error for m in metrics])
        rows.append(f"settling_s[plateau {i}]")
        table.append([m.plateaus[i].settling_time for m in metrics])
    rows.append("max_input")
    table.append([m.max_input for m in metrics])
    rows.append("input_violations")
    table.append([m.input_violations for m in metrics])
    rows.append("infeasible_steps")
    table.append([m.infeasible_steps for m in metrics])
    rows.append("tube_containment")
    table.append([m.tube_containment for m in metrics])
    rows.append("mean_solve_ms")
    table.append([m.mean_solve_ms for m in metrics])
    return rows, columns, table


def write_comparison(rows, columns, table, csv_path, text_path):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric"] + list(columns))
        for label, values in zip(rows, table):
            w.writerow([label] + [v if isinstance(v, int) else repr(float(v)) for v in values])
    widths = [max(len(str(label)) for label in rows)] + [
        max(12, len(c) + 2) for c in columns]
    lines = ["".ljust(widths[0]) + "".join(c.rjust(w) for c, w in zip(columns, widths[1:]))]
    for label, values in zip(rows, table):
        cells = []
        for v, w in zip(values, widths[1:]):
            if isinstance(v, int):
                cells.append(str(v).rjust(w))
            elif isinstance(v, float) and math.isnan(v):
                cells.append("-".rjust(w))
            else:
                cells.append(f"{v:.4g}".rjust(w))
        lines.append(str(label).ljust(widths[0]) + "".join(cells))
    text = "\n".join(lines) + "\n"
    with open(text_path, "w") as fh:
        fh.write(text)
    return text
