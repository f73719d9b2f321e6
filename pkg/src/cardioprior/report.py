"""Method-comparison tables: summary.csv and summary.md.

One row per method with the four macro metrics in the fixed column order
Dice, Jaccard, HD, ASSD; overlap metrics as percentages, distances in mm,
everything printed with two decimals. The published whole-heart baseline
at 64-cube resolution is embedded as a static reference row so desk-scale
runs always render next to the reference numbers.

The optional HD95 variant never enters these summaries; it lives only in
the per-case report.json files, clearly labeled.
"""

from __future__ import annotations

import json
import os

import numpy as np

#: Published reference row (64-cube whole-heart baseline): macro Dice and
#: Jaccard in percent, HD and ASSD in mm. Static documentation values, not
#: something this package can reproduce at desk scale.
REFERENCE_METHOD = "published_64cube_baseline"
REFERENCE_DICE_PCT = 90.85
REFERENCE_JACCARD_PCT = 83.63
REFERENCE_HD_MM = 7.64
REFERENCE_ASSD_MM = 1.03

COLUMNS = ("dice_pct", "jaccard_pct", "hd_mm", "assd_mm")
_HEADERS = ("Dice (%)", "Jaccard (%)", "HD (mm)", "ASSD (mm)")


def reference_row() -> dict[str, float | str]:
    return {
        "method": REFERENCE_METHOD,
        "dice_pct": REFERENCE_DICE_PCT,
        "jaccard_pct": REFERENCE_JACCARD_PCT,
        "hd_mm": REFERENCE_HD_MM,
        "assd_mm": REFERENCE_ASSD_MM,
    }


def _fmt(value) -> str:
    return "n/a" if value is None else f"{value:.2f}"


def aggregate_run(run_dir: str | os.PathLike) -> dict[str, float | str | None]:
    """Mean macro metrics over the per-case report JSONs in one run directory.

    The method name is the directory basename. Cases where a metric is
    absent are excluded from that metric's mean.
    """
    run_dir = os.fspath(run_dir)
    files = sorted(
        f for f in os.listdir(run_dir) if f.startswith("report_") and f.endswith(".json")
    )
    if not files:
        raise FileNotFoundError(f"no report_*.json files in {run_dir}")
    macros = []
    for f in files:
        with open(os.path.join(run_dir, f), "r", encoding="utf-8") as fh:
            macros.append(json.load(fh)["macro"])
    row: dict[str, float | str | None] = {"method": os.path.basename(os.path.normpath(run_dir))}
    for key, col in (("dice", "dice_pct"), ("jaccard", "jaccard_pct"),
                     ("hd_mm", "hd_mm"), ("assd_mm", "assd_mm")):
        vals = [m[key] for m in macros if m.get(key) is not None]
        if not vals:
            row[col] = None
        else:
            mean = float(np.mean(vals))
            row[col] = 100.0 * mean if col.endswith("_pct") else mean
    return row


def write_summary_csv(rows: list[dict], path: str | os.PathLike) -> None:
    lines = ["method," + ",".join(COLUMNS)]
    for row in rows:
        lines.append(str(row["method"]) + "," + ",".join(_fmt(row[c]) for c in COLUMNS))
    with open(os.fspath(path), "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def write_summary_md(rows: list[dict], path: str | os.PathLike) -> None:
    lines = [
        "| Method | " + " | ".join(_HEADERS) + " |",
        "|---|" + "---|" * len(_HEADERS),
    ]
    for row in rows:
        lines.append(
            "| " + str(row["method"]) + " | " + " | ".join(_fmt(row[c]) for c in COLUMNS) + " |"
        )
    with open(os.fspath(path), "w", encoding="utf-8", newline="") as fh:
        fh.write("\n".join(lines) + "\n")


def build_summary(
    run_dirs: list[str | os.PathLike], include_reference: bool = True
) -> list[dict]:
    rows = [reference_row()] if include_reference else []
    rows.extend(aggregate_run(d) for d in run_dirs)
    return rows
