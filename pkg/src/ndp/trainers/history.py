"""Training-history records shared by every trainer."""
from __future__ import annotations

import csv
from dataclasses import astuple, dataclass, fields
from pathlib import Path

HISTORY_COLUMNS = ("generation_or_iter", "best", "mean", "std", "nodes", "edges")


@dataclass
class HistoryRow:
    generation_or_iter: int
    best: float
    mean: float
    std: float
    nodes: int
    edges: int


def write_history_csv(path, rows) -> None:
    """One row per generation (evolution) or logged iteration (gradient trainers)."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for row in rows:
            values = astuple(row) if hasattr(row, "__dataclass_fields__") else tuple(row)
            writer.writerow([_fmt(v) for v in values[: len(HISTORY_COLUMNS)]])


def read_history_csv(path) -> list[HistoryRow]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        types = {f.name: f.type for f in fields(HistoryRow)}
        return [HistoryRow(**{k: (int(v) if types[k] in (int, "int") else float(v)) for k, v in r.items()})
                for r in reader]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
