"""SVG bar charts for experiment reports: one bar per result, SE whiskers.

Charts are plain hand-assembled SVG so reports render anywhere without a
plotting dependency. Output is a pure function of the inputs (fixed float
formatting, no timestamps), so regenerating a chart is byte-stable.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import ConfigError

_PALETTE = ("#4878a8", "#e49444", "#5fa052", "#b65fa0", "#907965")

_MARGIN_LEFT = 64.0
_MARGIN_RIGHT = 16.0
_MARGIN_TOP = 48.0
_MARGIN_BOTTOM = 96.0


@dataclass(frozen=True)
class Bar:
    label: str
    mean: float
    se: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.se)):
            raise ConfigError(f"bar {self.label!r} has non-finite values")
        if self.se < 0:
            raise ConfigError(f"bar {self.label!r} has negative SE")


def bars_from_report(report: dict, label: str | None = None) -> list[Bar]:
    """One bar per evaluated dataset, labeled family/mode unless overridden.

    Fine-tune reports contribute an extra bar for the single-domain baseline
    so the comparison the report was run for is visible in one chart.
    """
    results = report.get("results")
    if not isinstance(results, dict) or not results:
        raise ConfigError("report has no results section")
    cfg = report.get("config", {})
    prefix = label if label is not None else \
        f"{cfg.get('family', 'model')} {cfg.get('mode', '')}".strip()
    bars = []
    for dataset in sorted(results):
        entry = results[dataset]
        name = f"{prefix}: {dataset}" if len(results) > 1 else prefix or dataset
        bars.append(Bar(name, float(entry["mean"]), float(entry.get("se", 0.0))))
    baseline = report.get("baseline_single")
    if baseline is not None:
        bars.append(Bar(f"{prefix} (single-domain baseline)",
                        float(baseline["mean"]), float(baseline.get("se", 0.0))))
    return bars


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    raw = (hi - lo) / max(n, 1)
    magnitude = 10.0 ** math.floor(math.log10(raw)) if raw > 0 else 1.0
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        step = mult * magnitude
        if (hi - lo) / step <= n:
            break
    first = math.ceil(lo / step) * step
    ticks = []
    value = first
    while value <= hi + 1e-12:
        ticks.append(round(value, 10))
        value += step
    return ticks


def render_bar_chart(bars: list[Bar], title: str = "",
                     y_label: str = "AUPRC (mean over seeds, ±SE)",
                     width: int = 720, height: int = 420) -> str:
    if not bars:
        raise ConfigError("nothing to plot: no bars")
    plot_w = width - _MARGIN_LEFT - _MARGIN_RIGHT
    plot_h = height - _MARGIN_TOP - _MARGIN_BOTTOM
    lo = min(0.0, min(b.mean - b.se for b in bars))
    hi = max(0.0, max(b.mean + b.se for b in bars))
    if hi == lo:
        hi = lo + 1.0
    span = hi - lo
    lo -= 0.05 * span
    hi += 0.05 * span

    def y_px(value: float) -> float:
        return _MARGIN_TOP + plot_h * (hi - value) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}" '
        f'font-family="sans-serif" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="24" text-anchor="middle" '
                   f'font-size="15">{escape(title)}</text>')
    out.append(f'<text x="14" y="{_MARGIN_TOP + plot_h / 2:.2f}" '
               f'text-anchor="middle" '
               f'transform="rotate(-90 14 {_MARGIN_TOP + plot_h / 2:.2f})">'
               f'{escape(y_label)}</text>')
    for tick in _ticks(lo, hi):
        y = y_px(tick)
        out.append(f'<line x1="{_MARGIN_LEFT:.2f}" y1="{y:.2f}" '
                   f'x2="{width - _MARGIN_RIGHT:.2f}" y2="{y:.2f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{_MARGIN_LEFT - 6:.2f}" y="{y + 4:.2f}" '
                   f'text-anchor="end">{tick:g}</text>')
    slot = plot_w / len(bars)
    bar_w = slot * 0.6
    zero = y_px(max(lo, min(hi, 0.0)))
    for i, bar in enumerate(bars):
        x = _MARGIN_LEFT + slot * i + (slot - bar_w) / 2
        top = y_px(max(bar.mean, 0.0))
        bottom = y_px(min(bar.mean, 0.0))
        color = _PALETTE[i % len(_PALETTE)]
        out.append(f'<rect class="bar" x="{x:.2f}" y="{top:.2f}" '
                   f'width="{bar_w:.2f}" height="{max(bottom - top, 0.5):.2f}" '
                   f'fill="{color}"/>')
        if bar.se > 0:
            cx = x + bar_w / 2
            y_hi = y_px(bar.mean + bar.se)
            y_lo = y_px(bar.mean - bar.se)
            cap = bar_w * 0.25
            for x1, y1, x2, y2 in ((cx, y_hi, cx, y_lo),
                                   (cx - cap, y_hi, cx + cap, y_hi),
                                   (cx - cap, y_lo, cx + cap, y_lo)):
                out.append(f'<line class="whisker" x1="{x1:.2f}" y1="{y1:.2f}" '
                           f'x2="{x2:.2f}" y2="{y2:.2f}" stroke="#333333" '
                           f'stroke-width="1.5"/>')
        value_y = min(top, y_px(bar.mean + bar.se)) - 6
        out.append(f'<text class="value" x="{x + bar_w / 2:.2f}" '
                   f'y="{value_y:.2f}" text-anchor="middle">'
                   f'{bar.mean:.3f}</text>')
        label_x = x + bar_w / 2
        label_y = height - _MARGIN_BOTTOM + 16
        out.append(f'<text class="label" x="{label_x:.2f}" y="{label_y:.2f}" '
                   f'text-anchor="end" '
                   f'transform="rotate(-30 {label_x:.2f} {label_y:.2f})">'
                   f'{escape(bar.label)}</text>')
    out.append(f'<line x1="{_MARGIN_LEFT:.2f}" y1="{zero:.2f}" '
               f'x2="{width - _MARGIN_RIGHT:.2f}" y2="{zero:.2f}" '
               f'stroke="#333333"/>')
    out.append("</svg>")
    return "\n".join(out)


def plot_report_files(report_paths: list[str | Path], out_path: str | Path,
                      title: str = "") -> str:
    """Render the results of one or more report JSON files into one chart."""
    bars: list[Bar] = []
    for path in report_paths:
        try:
            report = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read report {path}: {exc}") from exc
        bars.extend(bars_from_report(report))
    svg = render_bar_chart(bars, title=title)
    Path(out_path).write_text(svg, encoding="utf-8")
    return svg
