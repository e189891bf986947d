"""Aggregate tables over repeated runs, as text and as round-trippable CSV."""

import csv
from dataclasses import dataclass

from .errors import ValidationError
from .evaluation import METRIC_NAMES
from .trainer import Aggregate

_STATS = ("mean", "std", "min", "max")


@dataclass
class ReportRow:
    mode: str
    target: str
    cells: dict  # metric -> Aggregate

    def __post_init__(self):
        missing = [m for m in METRIC_NAMES if m not in self.cells]
        if missing:
            raise ValidationError(f"report row {self.mode}/{self.target} lacks {missing}")


def format_cell(agg, digits=4):
    """``mean ± std (min,max)``."""
    f = f"{{:.{digits}f}}"
    return f"{f.format(agg.mean)} ± {f.format(agg.std)} ({f.format(agg.min)},{f.format(agg.max)})"


def rows_from_results(results):
    """One row per (training mode, evaluation target) in the order given."""
    rows = []
    for res in results:
        for target, cells in res.aggregates.items():
            rows.append(ReportRow(res.label, target, dict(cells)))
    return rows


def format_table(rows, digits=4):
    header = ["mode", "target", *(m.upper() for m in METRIC_NAMES)]
    body = [[r.mode, r.target, *(format_cell(r.cells[m], digits) for m in METRIC_NAMES)] for r in rows]
    widths = [max(len(line[i]) for line in [header, *body]) for i in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(line, widths)).rstrip() for line in [header, *body]]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report_csv(path, rows):
    """Full-precision CSV: ``mode,target`` then ``<metric>_<stat>`` columns."""
    fields = ["mode", "target"] + [f"{m}_{s}" for m in METRIC_NAMES for s in _STATS]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([r.mode, r.target] + [repr(getattr(r.cells[m], s)) for m in METRIC_NAMES for s in _STATS])


def read_report_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for rec in reader:
            try:
                cells = {m: Aggregate(*(float(rec[f"{m}_{s}"]) for s in _STATS)) for m in METRIC_NAMES}
            except (KeyError, TypeError, ValueError) as exc:
                raise ValidationError(f"malformed report CSV {path}: {exc}") from None
            rows.append(ReportRow(rec["mode"], rec["target"], cells))
    return rows
