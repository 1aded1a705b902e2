import csv
import os
from collections.abc import Iterable, Mapping

from hskip.experiments import RunRecord
from hskip.oracle import LegalityReport

CSV_HEADER = [
    "run_id",
    "seed",
    "n",
    "scenario",
    "rounds_to_legal",
    "total_messages",
    "additional_messages",
    "max_degree",
    "dilation",
    "avg_normalized_congestion",
    "surviving_fraction",
    "legal",
]


def _cell(value: object) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def csv_row(record: RunRecord) -> list[str]:
    return [_cell(getattr(record, name)) for name in CSV_HEADER]


def write_csv(records: Iterable[RunRecord], output_file: str) -> int:
    """Append rows sorted by (scenario, n, seed); the header goes into new files only."""
    rows = sorted(records, key=lambda r: r.sort_key)
    parent = os.path.dirname(output_file)
    if parent:
        os.makedirs(parent, exist_ok=True)
    fresh = not os.path.exists(output_file) or os.path.getsize(output_file) == 0
    with open(output_file, "a", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        if fresh:
            writer.writerow(CSV_HEADER)
        for r in rows:
            writer.writerow(csv_row(r))
    return len(rows)


def render_diff(report: LegalityReport, names: Mapping[int, str] | None = None) -> str:
    lines = report.lines(names)
    return "\n".join(lines) + "\n" if lines else ""
