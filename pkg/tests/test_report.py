"""Tests for CSV/JSON/SVG reporting artifacts."""

import json

import numpy as np
import pytest

from incmad.scoring import MetricsHistory, forgetting_metric
from incmad.report import (
    read_metrics_csv,
    rebuild_reports,
    write_metrics_csv,
    write_seed_report,
    write_aggregate_summary,
    write_svg_chart,
)
from incmad.training import RunReport


def _history():
    h = MetricsHistory()
    h.add(0, "object00", iauroc=90.0, pauroc=88.5, aupro=75.25)
    h.add(1, "object00", iauroc=85.0, pauroc=87.0, aupro=70.0)
    h.add(1, "object01", iauroc=70.125, pauroc=66.0, aupro=60.5)
    h.add(2, "object00", iauroc=80.0, pauroc=86.0, aupro=71.0)
    h.add(2, "object01", iauroc=75.0, pauroc=65.0, aupro=61.0)
    h.add(2, "object02", iauroc=99.0, pauroc=98.0, aupro=97.0)
    return h


def _report(seed=0):
    h = _history()
    rng = np.random.default_rng(0)
    final_eval = {
        "object00": {
            "maps": rng.random((2, 8, 8)),
            "masks": (rng.random((2, 8, 8)) > 0.8).astype(float),
            "scores": rng.random(2),
            "labels": np.array([0, 1]),
        }
    }
    return RunReport(
        seed=seed,
        history=h,
        fm={"iauroc": 10.0, "pauroc": 2.5, "aupro": 4.25},
        final_means={"iauroc": 84.67, "pauroc": 83.0, "aupro": 76.33},
        final_eval=final_eval,
        wall_clock=1.25,
        config_hash="abc123",
    )


class TestMetricsCsv:
    def test_roundtrip_exact(self, tmp_path):
        h = _history()
        path = tmp_path / "metrics.csv"
        write_metrics_csv(h, path)
        back = read_metrics_csv(path)
        assert back.records == h.records

    def test_row_count_contract(self, tmp_path):
        h = _history()
        path = tmp_path / "metrics.csv"
        write_metrics_csv(h, path)
        lines = path.read_text().strip().split("\n")
        assert len(lines) == 1 + len(h.records)
        assert lines[0] == "step,object,iauroc,pauroc,aupro"

    def test_byte_identical_rewrite(self, tmp_path):
        h = _history()
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_metrics_csv(h, a)
        write_metrics_csv(h, b)
        assert a.read_bytes() == b.read_bytes()

    def test_full_float_precision(self, tmp_path):
        h = MetricsHistory()
        h.add(0, "x", iauroc=1 / 3 * 100, pauroc=np.pi * 10, aupro=2 / 7 * 100)
        path = tmp_path / "metrics.csv"
        write_metrics_csv(h, path)
        back = read_metrics_csv(path)
        assert back.value(0, "x", "iauroc") == h.value(0, "x", "iauroc")
        assert back.value(0, "x", "pauroc") == h.value(0, "x", "pauroc")
        assert back.value(0, "x", "aupro") == h.value(0, "x", "aupro")


class TestSeedReport:
    def test_writes_all_artifacts(self, tmp_path):
        rep = _report()
        write_seed_report(rep, tmp_path / "seed_0")
        base = tmp_path / "seed_0"
        assert (base / "metrics.csv").exists()
        assert (base / "summary.json").exists()
        assert (base / "curves_iauroc.svg").exists()
        assert (base / "curves_pauroc.svg").exists()
        assert (base / "curves_aupro.svg").exists()
        heatmaps = sorted((base / "heatmaps").iterdir())
        assert [p.name for p in heatmaps] == ["object00_00.png", "object00_01.png"]
        summary = json.loads((base / "summary.json").read_text())
        assert summary["seed"] == 0
        assert summary["fm"]["iauroc"] == 10.0

    def test_summary_fm_dashes_when_undefined(self, tmp_path):
        rep = _report()
        rep.fm = {"iauroc": None, "pauroc": None, "aupro": None}
        write_seed_report(rep, tmp_path / "seed_0")
        summary = json.loads((tmp_path / "seed_0" / "summary.json").read_text())
        assert summary["fm"] == {"iauroc": "--", "pauroc": "--", "aupro": "--"}


class TestAggregateSummary:
    def test_mean_std_across_seeds(self, tmp_path):
        reps = [_report(seed=0), _report(seed=1)]
        reps[1].final_means = {"iauroc": 80.67, "pauroc": 81.0, "aupro": 74.33}
        summary = write_aggregate_summary(reps, tmp_path)
        want_mean = (84.67 + 80.67) / 2
        assert summary["final"]["iauroc"]["mean"] == pytest.approx(want_mean)
        assert summary["seeds"] == [0, 1]
        assert (tmp_path / "summary.json").exists()

    def test_undefined_fm_aggregates_to_dashes(self, tmp_path):
        reps = [_report(seed=0)]
        reps[0].fm = {"iauroc": None, "pauroc": None, "aupro": None}
        summary = write_aggregate_summary(reps, tmp_path)
        assert summary["fm"]["iauroc"]["mean"] == "--"


class TestRebuild:
    def test_fm_recomputed_from_csv(self, tmp_path):
        rep = _report()
        write_seed_report(rep, tmp_path / "seed_0")
        summary = rebuild_reports(tmp_path)
        h = read_metrics_csv(tmp_path / "seed_0" / "metrics.csv")
        for kind in ("iauroc", "pauroc", "aupro"):
            want = forgetting_metric(h, kind)
            assert summary["fm"][kind]["per_seed"] == [want]

    def test_missing_dir_raises(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            rebuild_reports(tmp_path)


class TestSvgChart:
    def test_structure(self, tmp_path):
        path = tmp_path / "chart.svg"
        write_svg_chart(_history(), "iauroc", path, title="demo")
        text = path.read_text()
        assert text.startswith("<svg")
        assert text.rstrip().endswith("</svg>")
        # object00 and object01 have multi-step series, object02 is a point
        assert text.count("<polyline") == 2
        assert "object02" in text
        assert "demo" in text

    def test_single_point_history(self, tmp_path):
        h = MetricsHistory()
        h.add(0, "only", iauroc=50.0, pauroc=50.0, aupro=50.0)
        path = tmp_path / "one.svg"
        write_svg_chart(h, "iauroc", path)
        assert "<circle" in path.read_text()

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.svg", tmp_path / "b.svg"
        write_svg_chart(_history(), "aupro", a)
        write_svg_chart(_history(), "aupro", b)
        assert a.read_bytes() == b.read_bytes()
