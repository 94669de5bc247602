"""Run artifacts: metrics CSV, JSON summaries, heatmap PNGs, SVG charts.

Float cells are written with repr (shortest round-trip form), so a rerun
with the same config and seed reproduces every file byte for byte, and
reading the CSV back recovers the exact float values.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .scoring import MetricsHistory, UndefinedMetricError, forgetting_metric
from .training import METRIC_KINDS, RunReport

__all__ = [
    "write_metrics_csv",
    "read_metrics_csv",
    "write_seed_report",
    "write_aggregate_summary",
    "rebuild_reports",
    "write_svg_chart",
]


def write_metrics_csv(history: MetricsHistory, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,object," + ",".join(METRIC_KINDS)]
    for (step, obj) in sorted(history.records):
        rec = history.records[(step, obj)]
        cells = ",".join(repr(rec[k]) for k in METRIC_KINDS)
        lines.append(f"{step},{obj},{cells}")
    path.write_text("\n".join(lines) + "\n")


def read_metrics_csv(path: str | Path) -> MetricsHistory:
    history = MetricsHistory()
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            history.add(
                int(row["step"]),
                row["object"],
                **{k: float(row[k]) for k in METRIC_KINDS},
            )
    return history


def _fm_cell(value) -> object:
    # undefined forgetting (single-step protocols) is reported as "--"
    return "--" if value is None else value


def _json_dump(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_seed_report(report: RunReport, seed_dir: str | Path) -> None:
    """All artifacts of one seeded run: CSV, summary, heatmaps, charts."""
    seed_dir = Path(seed_dir)
    write_metrics_csv(report.history, seed_dir / "metrics.csv")
    _json_dump(
        {
            "seed": report.seed,
            "config_hash": report.config_hash,
            "final_means": report.final_means,
            "fm": {k: _fm_cell(v) for k, v in report.fm.items()},
            "wall_clock_seconds": round(report.wall_clock, 3),
        },
        seed_dir / "summary.json",
    )
    heat_dir = seed_dir / "heatmaps"
    heat_dir.mkdir(parents=True, exist_ok=True)
    for obj, ev in sorted(report.final_eval.items()):
        maps = ev["maps"]
        lo, hi = maps.min(), maps.max()
        scale = hi - lo if hi > lo else 1.0
        for i, m in enumerate(maps):
            img = np.round(255.0 * (m - lo) / scale).astype(np.uint8)
            Image.fromarray(img).save(heat_dir / f"{obj}_{i:02d}.png")
    for kind in METRIC_KINDS:
        write_svg_chart(
            report.history, kind, seed_dir / f"curves_{kind}.svg",
            title=f"{kind} per object across steps",
        )


def _aggregate(values: list) -> dict:
    defined = [v for v in values if v is not None]
    if not defined:
        return {"mean": "--", "std": "--", "per_seed": ["--"] * len(values)}
    return {
        "mean": float(np.mean(defined)),
        "std": float(np.std(defined)),
        "per_seed": [_fm_cell(v) for v in values],
    }


def write_aggregate_summary(reports: list, out_dir: str | Path, extra: dict | None = None) -> dict:
    """Mean and std across seeds of final metrics and forgetting."""
    summary = {
        "seeds": [r.seed for r in reports],
        "config_hash": reports[0].config_hash if reports else "",
        "final": {
            kind: _aggregate([r.final_means[kind] for r in reports]) for kind in METRIC_KINDS
        },
        "fm": {kind: _aggregate([r.fm[kind] for r in reports]) for kind in METRIC_KINDS},
        "wall_clock_total_seconds": round(sum(r.wall_clock for r in reports), 3),
    }
    if extra:
        summary.update(extra)
    _json_dump(summary, Path(out_dir) / "summary.json")
    return summary


def rebuild_reports(run_dir: str | Path) -> dict:
    """Regenerates charts and summaries from the stored metrics CSVs.

    The forgetting values are recomputed from the CSV contents, keeping the
    metrics file the single source of truth.
    """
    run_dir = Path(run_dir)
    seed_dirs = sorted(p for p in run_dir.glob("seed_*") if (p / "metrics.csv").exists())
    if not seed_dirs:
        raise FileNotFoundError(f"no seed_*/metrics.csv under {run_dir}")
    fm_rows, final_rows, seeds = [], [], []
    for sd in seed_dirs:
        history = read_metrics_csv(sd / "metrics.csv")
        seeds.append(int(sd.name.split("_")[1]))
        fm = {}
        for kind in METRIC_KINDS:
            try:
                fm[kind] = forgetting_metric(history, kind)
            except UndefinedMetricError:
                fm[kind] = None
        final_step = history.steps()[-1]
        finals = {
            kind: float(np.mean([history.value(final_step, o, kind) for o in history.objects()]))
            for kind in METRIC_KINDS
        }
        fm_rows.append(fm)
        final_rows.append(finals)
        for kind in METRIC_KINDS:
            write_svg_chart(
                history, kind, sd / f"curves_{kind}.svg",
                title=f"{kind} per object across steps",
            )
    summary = {
        "seeds": seeds,
        "final": {
            kind: _aggregate([row[kind] for row in final_rows]) for kind in METRIC_KINDS
        },
        "fm": {kind: _aggregate([row[kind] for row in fm_rows]) for kind in METRIC_KINDS},
    }
    _json_dump(summary, run_dir / "summary.json")
    return summary


# -- hand-rolled SVG line chart ------------------------------------------------

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 60, 150, 40, 50


def _color(i: int, n: int) -> str:
    return f"hsl({int(360 * i / max(n, 1))},65%,40%)"


def write_svg_chart(
    history: MetricsHistory, kind: str, path: str | Path, title: str = ""
) -> None:
    """Accuracy-versus-step polyline chart, one line per object."""
    steps = history.steps()
    objects = history.objects()
    values = {
        obj: [(s, history.value(s, obj, kind)) for s in steps if (s, obj) in history.records]
        for obj in objects
    }
    all_vals = [v for pts in values.values() for _, v in pts]
    lo, hi = min(all_vals), max(all_vals)
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.08 * (hi - lo)
    lo, hi = lo - pad, hi + pad

    x0, x1 = _ML, _W - _MR
    y0, y1 = _H - _MB, _MT
    smin, smax = steps[0], steps[-1]
    sspan = max(smax - smin, 1)

    def sx(s):
        return x0 + (s - smin) / sspan * (x1 - x0)

    def sy(v):
        return y0 + (v - lo) / (hi - lo) * (y1 - y0)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
        f'viewBox="0 0 {_W} {_H}">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W // 2}" y="24" text-anchor="middle" font-size="15" '
        f'font-family="sans-serif">{title or kind}</text>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = lo + frac * (hi - lo)
        y = sy(v)
        parts.append(
            f'<line x1="{x0}" y1="{y:.1f}" x2="{x1}" y2="{y:.1f}" '
            f'stroke="#ddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x0 - 8}" y="{y + 4:.1f}" text-anchor="end" font-size="11" '
            f'font-family="sans-serif">{v:.1f}</text>'
        )
    for s in steps:
        x = sx(s)
        parts.append(
            f'<line x1="{x:.1f}" y1="{y0}" x2="{x:.1f}" y2="{y0 + 5}" stroke="#333"/>'
        )
        parts.append(
            f'<text x="{x:.1f}" y="{y0 + 18}" text-anchor="middle" font-size="11" '
            f'font-family="sans-serif">{s}</text>'
        )
    parts.append(
        f'<text x="{(x0 + x1) // 2}" y="{_H - 12}" text-anchor="middle" font-size="12" '
        f'font-family="sans-serif">incremental step</text>'
    )
    for i, obj in enumerate(objects):
        pts = values[obj]
        col = _color(i, len(objects))
        coords = " ".join(f"{sx(s):.1f},{sy(v):.1f}" for s, v in pts)
        if len(pts) > 1:
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{col}" stroke-width="1.5"/>'
            )
        for s, v in pts:
            parts.append(f'<circle cx="{sx(s):.1f}" cy="{sy(v):.1f}" r="2.5" fill="{col}"/>')
        ly = _MT + 16 * i
        parts.append(
            f'<line x1="{x1 + 10}" y1="{ly}" x2="{x1 + 28}" y2="{ly}" '
            f'stroke="{col}" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{x1 + 33}" y="{ly + 4}" font-size="11" '
            f'font-family="sans-serif">{obj}</text>'
        )
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n")
