"""SVG chart rendering: structure, determinism, report extraction."""

import json
import xml.etree.ElementTree as ET

import pytest

from ehrseq.errors import ConfigError
from ehrseq.plotting import (Bar, bars_from_report, plot_report_files,
                             render_bar_chart)

SVG = "{http://www.w3.org/2000/svg}"


def sample_report(mean=0.42, se=0.03, mode="single", datasets=("hosp_a",)):
    return {
        "format_version": 1,
        "config": {"family": "text_hierarchical", "mode": mode,
                   "seeds": [0, 1]},
        "results": {name: {"per_seed": [mean - se, mean + se],
                           "mean": mean, "se": se} for name in datasets},
    }


class TestBarExtraction:
    def test_one_bar_per_dataset(self):
        report = sample_report(datasets=("hosp_a", "hosp_b"))
        bars = bars_from_report(report)
        assert [b.label for b in bars] == [
            "text_hierarchical single: hosp_a",
            "text_hierarchical single: hosp_b"]
        assert all(b.mean == 0.42 and b.se == 0.03 for b in bars)

    def test_label_override_and_single_dataset(self):
        bars = bars_from_report(sample_report(), label="ours")
        assert [b.label for b in bars] == ["ours"]

    def test_finetune_baseline_becomes_extra_bar(self):
        report = sample_report(mode="transfer_finetune")
        report["baseline_single"] = {"per_seed": [0.3, 0.4], "mean": 0.35,
                                     "se": 0.05}
        bars = bars_from_report(report)
        assert len(bars) == 2
        assert bars[1].mean == 0.35
        assert "baseline" in bars[1].label

    def test_missing_results_rejected(self):
        with pytest.raises(ConfigError):
            bars_from_report({"config": {}})

    def test_bad_bar_values_rejected(self):
        with pytest.raises(ConfigError):
            Bar("x", float("nan"))
        with pytest.raises(ConfigError):
            Bar("x", 0.5, se=-0.1)


class TestRendering:
    def test_svg_parses_with_expected_elements(self):
        bars = [Bar("alpha", 0.40, 0.02), Bar("beta", 0.25, 0.0),
                Bar("gamma", 0.61, 0.05)]
        svg = render_bar_chart(bars, title="mortality")
        root = ET.fromstring(svg)
        assert root.tag == f"{SVG}svg"
        rects = [el for el in root.iter(f"{SVG}rect")
                 if el.get("class") == "bar"]
        assert len(rects) == 3
        whiskers = [el for el in root.iter(f"{SVG}line")
                    if el.get("class") == "whisker"]
        assert len(whiskers) == 6  # two bars with SE, three lines each
        labels = [el.text for el in root.iter(f"{SVG}text")
                  if el.get("class") == "label"]
        assert labels == ["alpha", "beta", "gamma"]

    def test_negative_means_still_render(self):
        svg = render_bar_chart([Bar("delta", -0.08, 0.01)])
        root = ET.fromstring(svg)
        bar = next(el for el in root.iter(f"{SVG}rect")
                   if el.get("class") == "bar")
        assert float(bar.get("height")) > 0

    def test_label_text_is_escaped(self):
        svg = render_bar_chart([Bar("a<b & c", 0.5)])
        ET.fromstring(svg)  # would raise on raw < or &
        assert "a&lt;b &amp; c" in svg

    def test_deterministic_output(self):
        bars = [Bar("one", 0.123456, 0.01), Bar("two", 0.7, 0.0)]
        assert render_bar_chart(bars) == render_bar_chart(bars)

    def test_empty_chart_rejected(self):
        with pytest.raises(ConfigError):
            render_bar_chart([])


class TestFileRoundTrip:
    def test_plot_report_files_writes_svg(self, tmp_path):
        paths = []
        for i, mean in enumerate((0.4, 0.5)):
            p = tmp_path / f"report{i}.json"
            p.write_text(json.dumps(sample_report(mean=mean)))
            paths.append(p)
        out = tmp_path / "chart.svg"
        svg = plot_report_files(paths, out, title="comparison")
        assert out.read_text() == svg
        root = ET.fromstring(svg)
        bars = [el for el in root.iter(f"{SVG}rect")
                if el.get("class") == "bar"]
        assert len(bars) == 2

    def test_unreadable_report_rejected(self, tmp_path):
        bad = tmp_path / "nope.json"
        with pytest.raises(ConfigError):
            plot_report_files([bad], tmp_path / "out.svg")
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            plot_report_files([bad], tmp_path / "out.svg")
