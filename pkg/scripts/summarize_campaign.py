#!/usr/bin/env python3
import argparse
import csv
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), ".."))

from hskip.scaling import fit_log_linear, fit_loglog_slope, medians_by_n  # noqa: E402


def read_rows(path: str) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def summarize(rows: list[dict]) -> list[str]:
    """One block per scenario: legal share, median rounds/messages by n, and the fits."""
    lines: list[str] = []
    scenarios = sorted({r["scenario"] for r in rows})
    for scenario in scenarios:
        sel = [r for r in rows if r["scenario"] == scenario]
        legal = [r for r in sel if r["legal"] == "true"]
        lines.append(f"{scenario}: {len(legal)}/{len(sel)} legal")
        if not legal:
            continue
        ns, rounds = medians_by_n((int(r["n"]), float(r["rounds_to_legal"])) for r in legal)
        _, msgs = medians_by_n(
            (int(r["n"]), float(r["total_messages"]) / int(r["n"])) for r in legal
        )
        for n, rd, m in zip(ns, rounds, msgs):
            lines.append(f"  n={n}: median rounds {rd:g}, median messages/node {m:.1f}")
        if len(ns) >= 2:
            fit = fit_log_linear(ns, rounds)
            lines.append(
                f"  rounds ~ {fit.intercept:.2f} + {fit.slope:.2f}*log2(n)  (R^2={fit.r2:.3f})"
            )
            if min(ns) > 2 and all(m > 0 for m in msgs):
                slope = fit_loglog_slope(ns, msgs).slope
                lines.append(f"  messages/node log-log slope {slope:.2f}")
    return lines


def main():
    ap = argparse.ArgumentParser(description="Summarize a results CSV with scaling fits")
    ap.add_argument("csv", nargs="?", default="result/hskip-runs.csv", help="Results CSV")
    args = ap.parse_args()

    if not os.path.exists(args.csv):
        print(f"No results at {args.csv}")
        return
    rows = read_rows(args.csv)
    if not rows:
        print(f"{args.csv} has no rows")
        return
    print("\n".join(summarize(rows)))


if __name__ == "__main__":
    main()
