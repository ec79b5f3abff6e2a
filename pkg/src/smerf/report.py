"""Markdown/CSV tables and static plots from evaluation and ablation results."""

from __future__ import annotations

import csv
import io
import math
from typing import Mapping, Sequence

import numpy as np

from .sdmap import ROAD_TYPES

REPORT_FIELDS = ("DET_l", "TOP_ll", "DET_t", "TOP_lt", "OLS")
TOY_FIELDS = ("DET_l", "TOP_ll", "OLS_reduced")
DASH = "—"


class SchemaError(ValueError):
    pass


def percent_delta(old: float, new: float) -> str:
    """Relative change ``(new - old) / old * 100`` to one decimal, or a dash when undefined."""
    if old == 0:
        return DASH
    return f"{(new - old) / old * 100.0:+.1f}%"


def _num(record: Mapping, key: str, source: str) -> float:
    if key not in record:
        raise SchemaError(f"{source}: missing field {key!r}")
    value = record[key]
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise SchemaError(f"{source}: field {key!r} must be a finite number, got {value!r}")
    return float(value)


def check_eval_report(record: Mapping, source: str = "report") -> dict[str, float]:
    if not isinstance(record, Mapping):
        raise SchemaError(f"{source}: expected a JSON object")
    return {k: _num(record, k, source) for k in REPORT_FIELDS}


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def comparison_rows(names: Sequence[str], records: Sequence[Mapping[str, float]],
                    fields: Sequence[str]) -> list[list[str]]:
    rows = [[n] + [f"{r[f]:.1f}" for f in fields] for n, r in zip(names, records)]
    if len(records) == 2:
        rows.append(["Δ Improvement"] + [percent_delta(records[0][f], records[1][f]) for f in fields])
    return rows


def eval_table(reports: Sequence[tuple[str, Mapping]], fmt: str = "markdown") -> str:
    """One row per report; a delta row is added when exactly two are given."""
    names = [n for n, _ in reports]
    records = [check_eval_report(r, n) for n, r in reports]
    rows = comparison_rows(names, records, REPORT_FIELDS)
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", *REPORT_FIELDS])
        w.writerows(rows)
        return buf.getvalue()
    return _table(["Method", *REPORT_FIELDS], rows)


def check_ablation(result: Mapping, source: str = "ablation") -> None:
    for key in ("per_seed", "summary"):
        if key not in result:
            raise SchemaError(f"{source}: missing field {key!r}")
    variants = result["summary"].get("variants")
    if not variants:
        raise SchemaError(f"{source}: missing field 'summary.variants'")
    for i, row in enumerate(result["per_seed"]):
        for v in variants:
            if v not in row:
                raise SchemaError(f"{source}: missing field 'per_seed[{i}].{v}'")
            for sub in ("full", "close", "far"):
                if sub not in row[v]:
                    raise SchemaError(f"{source}: missing field 'per_seed[{i}].{v}.{sub}'")
                for f in TOY_FIELDS:
                    _num(row[v][sub], f, f"{source}: per_seed[{i}].{v}.{sub}")


def ablation_markdown(result: Mapping) -> str:
    """Overall table, distance/intersection breakdown and per-seed far-band gains."""
    check_ablation(result)
    variants = result["summary"]["variants"]
    per_seed = result["per_seed"]

    def mean(v, sub, f):
        vals = [row[v][sub][f] for row in per_seed if sub in row[v]]
        return float(np.mean(vals)) if vals else float("nan")

    out = [f"## Ablation ({len(per_seed)} seeds, mean)\n"]
    recs = [{f: mean(v, "full", f) for f in TOY_FIELDS} for v in variants]
    out.append(_table(["Method", *TOY_FIELDS], comparison_rows(variants, recs, TOY_FIELDS)))

    subsets = [s for s in ("close", "far", "non_intersection", "intersection") if s in per_seed[0][variants[0]]]
    out.append("\n## Breakdown (DET_l / TOP_ll)\n")
    header = ["Method"] + [f"{s} {f}" for s in subsets for f in ("DET_l", "TOP_ll")]
    recs = [{f"{s} {f}": mean(v, s, f) for s in subsets for f in ("DET_l", "TOP_ll")} for v in variants]
    out.append(_table(header, comparison_rows(variants, recs, header[1:])))

    out.append("\n## Far-band DET_l per seed\n")
    rows = []
    for row in per_seed:
        a, b = row[variants[0]]["far"]["DET_l"], row[variants[-1]]["far"]["DET_l"]
        rows.append([str(row["seed"]), f"{a:.2f}", f"{b:.2f}", f"{b - a:+.2f}"])
    out.append(_table(["Seed", variants[0], variants[-1], "gain"], rows))
    s = result["summary"]
    if "far_DET_l_wins" in s:
        out.append(f"\n{variants[-1]} >= {variants[0]} on far-band DET_l in "
                   f"{s['far_DET_l_wins']}/{len(per_seed)} seeds; mean gain {s['far_DET_l_mean_gain']:+.2f}.\n")
    return "".join(out)


def road_type_table(counts: Mapping[str, int]) -> str:
    total = sum(counts.values()) or 1
    rows = [[t, str(counts.get(t, 0)), f"{100.0 * counts.get(t, 0) / total:.1f}%"] for t in ROAD_TYPES]
    return _table(["Road type", "Count", "Share"], rows)


# ---------------------------------------------------------------------------
# Plots (matplotlib is optional)
# ---------------------------------------------------------------------------

def _pyplot():
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError as exc:  # pragma: no cover - depends on the environment
        raise RuntimeError("plotting needs matplotlib (pip install 'artifact[plot]')") from exc
    return plt


def plot_metric_bars(reports: Sequence[tuple[str, Mapping]], path, fields=REPORT_FIELDS) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    width = 0.8 / max(len(reports), 1)
    x = np.arange(len(fields))
    for i, (name, rec) in enumerate(reports):
        ax.bar(x + i * width, [rec[f] for f in fields], width, label=name)
    ax.set_xticks(x + width * (len(reports) - 1) / 2)
    ax.set_xticklabels(fields)
    ax.set_ylabel("score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_road_types(counts: Mapping[str, int], path) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(list(ROAD_TYPES), [counts.get(t, 0) for t in ROAD_TYPES])
    ax.set_ylabel("polylines")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
