from pathlib import Path

from hskip.experiments import RunRecord
from hskip.oracle import LegalityReport
from hskip.renderer import CSV_HEADER, csv_row, render_diff, write_csv


def _record(scenario: str, n: int, seed: int, **extra) -> RunRecord:
    return RunRecord(f"{scenario}-{n}-{seed}", seed, n, scenario, 5, 100, **extra)


def test_csv_cells():
    row = csv_row(_record("flow", 16, 1, dilation=3, avg_normalized_congestion=0.5, legal=True))
    assert row == [
        "flow-16-1",
        "1",
        "16",
        "flow",
        "5",
        "100",
        "",
        "0",
        "3",
        "0.500000",
        "",
        "true",
    ]


def test_write_csv_sorts_and_appends(tmp_path: Path):
    out = tmp_path / "nested" / "runs.csv"
    records = [_record("join", 32, 2), _record("converge", 16, 9), _record("join", 16, 1)]
    assert write_csv(records, str(out)) == 3
    write_csv([_record("leave", 16, 4)], str(out))

    lines = out.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert [line.split(",")[0] for line in lines[1:]] == [
        "converge-16-9",
        "join-16-1",
        "join-32-2",
        "leave-16-4",
    ]


def test_render_diff():
    assert render_diff(LegalityReport(True)) == ""
    report = LegalityReport(False, missing=((4, 2, 0),), stale=((1, 2),))
    assert render_diff(report, {1: "A", 2: "B", 4: "D"}) == "MISSING D→B@0\nSTALE A:B\n"
