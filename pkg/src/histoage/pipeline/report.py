"""
report.py
Report bundle: publication-style tables (CSV + aligned text), SVG plots rendered
from f-string templates, and the top-patch montage (PNG + JSON sidecar).
Every plot's data is written as CSV next to the drawing.
"""
import json
import logging
import math
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image, ImageDraw, ImageFont

from histoage.utils.errors import DataError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.9g"
CELL_PX = 256
LABEL_PX = 40
SEX_COLOURS = {"M": "#1f77b4", "F": "#d62728"}
ARM_COLOURS = {"actual": "#1f77b4", "predicted": "#ff7f0e"}
STRATUM_COLOURS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"]

SVG_TEMPLATE = """<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="12">
<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>
<text x="{title_x}" y="20" text-anchor="middle" font-size="14">{title}</text>
{body}
</svg>
"""


def write_csv(frame: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return path


def write_text(text: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
    return path


def write_table(frame: pd.DataFrame, csv_path, wide: pd.DataFrame) -> list:
    """Long table as CSV, wide publication layout as aligned text next to it."""
    csv_path = Path(csv_path)
    return [write_csv(frame, csv_path), write_text(wide.to_string(), csv_path.with_suffix(".txt"))]


# ---------------------- SVG ----------------------

class _Axes:
    def __init__(self, x_range, y_range, width=640, height=420, margin=55, log_x=False):
        self.width, self.height, self.margin = width, height, margin
        self.log_x = log_x
        self.x0, self.x1 = self._span(*(np.log(x_range) if log_x else x_range))
        self.y0, self.y1 = self._span(*y_range)

    @staticmethod
    def _span(lo, hi):
        lo, hi = float(lo), float(hi)
        if not np.isfinite(lo) or not np.isfinite(hi):
            return 0.0, 1.0
        return (lo - 0.5, hi + 0.5) if hi - lo < 1e-12 else (lo, hi)

    def x(self, value) -> float:
        value = math.log(value) if self.log_x else value
        return self.margin + (value - self.x0) / (self.x1 - self.x0) * (self.width - 2 * self.margin)

    def y(self, value) -> float:
        return self.height - self.margin - (value - self.y0) / (self.y1 - self.y0) * (self.height - 2 * self.margin)

    def frame(self, x_label: str, y_label: str) -> str:
        m, w, h = self.margin, self.width, self.height
        return (
            f'<line x1="{m}" y1="{h - m}" x2="{w - m}" y2="{h - m}" stroke="black"/>\n'
            f'<line x1="{m}" y1="{m}" x2="{m}" y2="{h - m}" stroke="black"/>\n'
            f'<text x="{w / 2:.1f}" y="{h - 15}" text-anchor="middle">{x_label}</text>\n'
            f'<text x="15" y="{h / 2:.1f}" text-anchor="middle" transform="rotate(-90 15 {h / 2:.1f})">{y_label}</text>\n'
            f'<text x="{m}" y="{h - m + 15}" text-anchor="middle">{self._tick(self.x0, self.log_x)}</text>\n'
            f'<text x="{w - m}" y="{h - m + 15}" text-anchor="middle">{self._tick(self.x1, self.log_x)}</text>\n'
            f'<text x="{m - 5}" y="{h - m}" text-anchor="end">{self.y0:.3g}</text>\n'
            f'<text x="{m - 5}" y="{m + 4}" text-anchor="end">{self.y1:.3g}</text>'
        )

    @staticmethod
    def _tick(value, log_x) -> str:
        return f"{math.exp(value):.3g}" if log_x else f"{value:.3g}"


def _render(axes: _Axes, title: str, body: list) -> str:
    return SVG_TEMPLATE.format(width=axes.width, height=axes.height, title_x=axes.width / 2, title=title, body="\n".join(body))


def scatter_svg(frame: pd.DataFrame, title: str = "Predicted vs actual age") -> str:
    lo = float(min(frame["actual_age"].min(), frame["predicted_age"].min())) if len(frame) else 0.0
    hi = float(max(frame["actual_age"].max(), frame["predicted_age"].max())) if len(frame) else 1.0
    axes = _Axes((lo, hi), (lo, hi))
    body = [axes.frame("Actual age (years)", "Predicted age (years)"),
            f'<line x1="{axes.x(lo):.1f}" y1="{axes.y(lo):.1f}" x2="{axes.x(hi):.1f}" y2="{axes.y(hi):.1f}" stroke="grey" stroke-dasharray="4 3"/>']
    for row in frame.itertuples(index=False):
        body.append(f'<circle cx="{axes.x(row.actual_age):.1f}" cy="{axes.y(row.predicted_age):.1f}" r="2.5" '
                    f'fill="{SEX_COLOURS.get(row.sex, "black")}" fill-opacity="0.6"/>')
    for i, (sex, colour) in enumerate(SEX_COLOURS.items()):
        body.append(f'<text x="{axes.width - 90}" y="{45 + 16 * i}" fill="{colour}">{"Males" if sex == "M" else "Females"}</text>')
    return _render(axes, title, body)


def curves_svg(curves: pd.DataFrame, title: str) -> str:
    axes = _Axes((0.0, float(curves["t"].max()) if len(curves) else 1.0), (0.0, 1.0))
    body = [axes.frame("Years since biopsy", "Survival probability")]
    for i, (stratum, part) in enumerate(curves.groupby("stratum", sort=True)):
        colour = STRATUM_COLOURS[i % len(STRATUM_COLOURS)]
        points = " ".join(f"{axes.x(t):.1f},{axes.y(s):.1f}" for t, s in zip(part["t"], part["survival"]))
        body.append(f'<polyline points="{points}" fill="none" stroke="{colour}" stroke-width="2"/>')
        body.append(f'<text x="{axes.width - 90}" y="{45 + 16 * i}" fill="{colour}">{stratum}</text>')
    return _render(axes, title, body)


def hr_svg(table: pd.DataFrame, title: str = "Hazard ratios (95% CI)") -> str:
    covariates = list(dict.fromkeys(table["covariate"]))
    lo = float(min(table["ci_lo"].min(), 1.0)) if len(table) else 0.5
    hi = float(max(table["ci_hi"].max(), 1.0)) if len(table) else 2.0
    height = 80 + 30 * max(len(covariates), 1)
    axes = _Axes((max(lo, 1e-3), hi), (0.0, 1.0), width=640, height=height, margin=70, log_x=True)
    body = [axes.frame("Hazard ratio (log scale)", ""),
            f'<line x1="{axes.x(1.0):.1f}" y1="{axes.margin}" x2="{axes.x(1.0):.1f}" y2="{height - axes.margin}" stroke="grey" stroke-dasharray="4 3"/>']
    arms = list(dict.fromkeys(table["arm"]))
    for row_index, covariate in enumerate(covariates):
        y_mid = axes.margin + 15 + 30 * row_index
        body.append(f'<text x="{axes.margin - 8}" y="{y_mid + 4}" text-anchor="end">{covariate}</text>')
        for arm_index, arm in enumerate(arms):
            part = table[(table["covariate"] == covariate) & (table["arm"] == arm)]
            if part.empty:
                continue
            r = part.iloc[0]
            y = y_mid - 5 + 10 * arm_index
            colour = ARM_COLOURS.get(arm, "black")
            body.append(f'<line x1="{axes.x(max(r.ci_lo, 1e-3)):.1f}" y1="{y}" x2="{axes.x(r.ci_hi):.1f}" y2="{y}" stroke="{colour}"/>')
            body.append(f'<circle cx="{axes.x(max(r.hr, 1e-3)):.1f}" cy="{y}" r="3" fill="{colour}"/>')
    for i, arm in enumerate(arms):
        body.append(f'<text x="{axes.width - 90}" y="{45 + 16 * i}" fill="{ARM_COLOURS.get(arm, "black")}">{arm}</text>')
    return _render(axes, title, body)


def inertia_svg(curve: pd.DataFrame, title: str = "Mean k-means inertia") -> str:
    ks = curve["k"].to_numpy(dtype=np.float64)
    values = curve["mean_inertia"].to_numpy(dtype=np.float64)
    axes = _Axes((ks.min(), ks.max()) if len(ks) else (1.0, 2.0), (0.0, values.max()) if len(values) else (0.0, 1.0))
    body = [axes.frame("Clusters per slide (k)", "Mean inertia")]
    if len(ks):
        points = " ".join(f"{axes.x(k):.1f},{axes.y(v):.1f}" for k, v in zip(ks, values))
        body.append(f'<polyline points="{points}" fill="none" stroke="black" stroke-width="2"/>')
        body.extend(f'<circle cx="{axes.x(k):.1f}" cy="{axes.y(v):.1f}" r="3" fill="black"/>' for k, v in zip(ks, values))
    return _render(axes, title, body)


# ---------------------- Montage ----------------------

def montage_shape(n: int, rows: int, cols: int) -> tuple[int, int]:
    """Grid that holds min(n, rows * cols) cells; shrinks when fewer patches are available."""
    shown = min(n, rows * cols)
    used_cols = min(cols, shown)
    return math.ceil(shown / used_cols), used_cols


def emit_montage(ranked: pd.DataFrame, images: dict, path, rows: int = 2, cols: int = 4,
                 regions: dict | None = None) -> list:
    """
    Top-ranked patches in rank order, row-major, each annotated with actual and
    predicted age (and region label when masks are known). Writes the PNG and
    a JSON sidecar with the cell list and region enrichment.
    """
    if ranked.empty:
        raise DataError("cannot build a montage from an empty ranking")
    path = Path(path)
    grid_rows, grid_cols = montage_shape(len(ranked), rows, cols)
    cells = ranked.head(grid_rows * grid_cols)
    canvas = Image.new("RGB", (grid_cols * CELL_PX, grid_rows * (CELL_PX + LABEL_PX)), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    font = ImageFont.load_default()
    records = []
    for position, row in enumerate(cells.itertuples(index=False)):
        r, c = divmod(position, grid_cols)
        x, y = c * CELL_PX, r * (CELL_PX + LABEL_PX)
        if row.patch_id not in images:
            raise DataError(f"no stored image for patch {row.patch_id}")
        tile_image = Image.fromarray(np.asarray(images[row.patch_id], dtype=np.uint8))
        if tile_image.size != (CELL_PX, CELL_PX):
            tile_image = tile_image.resize((CELL_PX, CELL_PX), Image.Resampling.BOX)
        canvas.paste(tile_image, (x, y))
        region = regions.get(row.patch_id) if regions else None
        label = f"#{int(row.rank)} age {row.actual_age:.0f} / pred {row.predicted_age:.1f}"
        draw.text((x + 4, y + CELL_PX + 4), label, fill=(0, 0, 0), font=font)
        if region:
            draw.text((x + 4, y + CELL_PX + 20), region, fill=(90, 90, 90), font=font)
        records.append({"position": position, "row": r, "col": c, "rank": int(row.rank), "patch_id": row.patch_id,
                        "actual_age": float(row.actual_age), "predicted_age": float(row.predicted_age), "region": region})
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")

    sidecar = {"rows": grid_rows, "cols": grid_cols, "cells": records}
    if regions:
        sidecar["region_enrichment"] = montage_enrichment([rec["region"] for rec in records],
                                                          [regions.get(p) for p in ranked["patch_id"]])
    json_path = path.with_suffix(".json")
    with open(json_path, "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
    logger.info(f"Montage written - {len(records)} cells - {grid_rows}x{grid_cols}")
    return [path, json_path]


def montage_enrichment(cell_regions: list, all_regions: list) -> dict:
    """Per region: share among montage cells, share among all ranked patches, and their ratio."""
    known = [r for r in all_regions if r]
    out = {}
    for region in sorted(set(known)):
        base = known.count(region) / len(known)
        share = cell_regions.count(region) / len(cell_regions) if cell_regions else 0.0
        out[region] = {"montage_share": share, "base_share": base, "ratio": share / base if base else None}
    return out
