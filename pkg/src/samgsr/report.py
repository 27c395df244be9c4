"""Tables and static SVG plots describing a signature."""

from __future__ import annotations

import csv
import math
from pathlib import Path
from xml.sax.saxutils import escape

CASE_COLOR = "#d62728"
CONTROL_COLOR = "#000000"


def write_subgroup_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["gene", "time_label", "class", "mean", "n"])
        for gene, time_label, cls, mean, n in rows:
            writer.writerow([gene, time_label, cls, "" if math.isnan(mean) else repr(mean), n])


def write_overlap_tsv(overlap, path) -> None:
    with Path(path).open("w") as fh:
        fh.write("time_points\tn_time_points\tgenes\n")
        for subset, count in overlap:
            fh.write(f"{'+'.join(subset)}\t{len(subset)}\t{count}\n")


def subgroup_svg(gene: str, rows, time_labels, width: int = 480, height: int = 320) -> str:
    """Class means versus time for one gene; cases in red, controls in black."""
    series = {"case": [], "control": []}
    for g, t, cls, mean, _ in rows:
        if g == gene:
            series[cls].append((time_labels.index(t), mean))
    values = [m for pts in series.values() for _, m in pts if not math.isnan(m)]
    lo, hi = (min(values), max(values)) if values else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    left, right, top, bottom = 60, 20, 30, 40
    pw, ph = width - left - right, height - top - bottom
    nt = len(time_labels)

    def x(i):
        return left + (pw * i / (nt - 1) if nt > 1 else pw / 2)

    def y(v):
        return top + ph * (hi - v) / (hi - lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(gene)}: subgroup means versus time</title>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(gene)}</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#444"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="#444"/>',
    ]
    for i, lab in enumerate(time_labels):
        out.append(
            f'<text x="{x(i):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="11">'
            f"{escape(lab)}</text>"
        )
    for v in (lo + pad, hi - pad):
        out.append(
            f'<text x="{left - 6}" y="{y(v) + 4:.1f}" text-anchor="end" font-size="11">{v:.2f}</text>'
        )
    for cls, color in (("control", CONTROL_COLOR), ("case", CASE_COLOR)):
        pts = [(i, m) for i, m in sorted(series[cls]) if not math.isnan(m)]
        if not pts:
            continue
        coords = " ".join(f"{x(i):.1f},{y(m):.1f}" for i, m in pts)
        out.append(
            f'<polyline class="{cls}" fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>'
        )
    out.append(
        f'<text x="{left + pw}" y="{top - 6}" text-anchor="end" font-size="11">'
        f'<tspan fill="{CASE_COLOR}">case</tspan> / <tspan fill="{CONTROL_COLOR}">control</tspan></text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def safe_filename(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
