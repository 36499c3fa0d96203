"""Diagnostics over scored AOIs: recall vs building area, feature correlations,
change-vs-track scatter data, plus small CSV and SVG writers."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence
from xml.sax.saxutils import escape

import numpy as np

from .ingest import AoiMetadata, FootprintSeries
from .matching import MatchTable
from .scot import ScoreReport, scot_score

DEFAULT_AREA_BINS = tuple(np.logspace(1, 4, 17).tolist())  # 16 log bins over [10, 1e4] m^2


class AnalysisError(ValueError):
    pass


@dataclass
class AreaCurve:
    edges: list[float]
    counts: list[int]
    matched: list[int]

    @property
    def recall(self) -> list[float | None]:
        """Per-bin recall; ``None`` marks empty bins."""
        return [m / c if c else None for m, c in zip(self.matched, self.counts)]

    def to_rows(self, gsd: float | None = None) -> list[dict]:
        rows = []
        for i, (c, m, r) in enumerate(zip(self.counts, self.matched, self.recall)):
            row = {"bin_lo": self.edges[i], "bin_hi": self.edges[i + 1], "count": c, "matched": m,
                   "recall": "NA" if r is None else r}
            if gsd:
                row["bin_lo_px2"] = self.edges[i] / gsd**2
                row["bin_hi_px2"] = self.edges[i + 1] / gsd**2
            rows.append(row)
        return rows


def recall_curve(areas: Sequence[float], matched: Sequence[bool], bins: Sequence[float] = DEFAULT_AREA_BINS) -> AreaCurve:
    """Bin instances by area and count matches per bin.

    Areas outside the edges are folded into the first or last bin, so the
    counts always add up to the number of instances.
    """
    edges = np.asarray(bins, dtype=float)
    if edges.ndim != 1 or len(edges) < 2:
        raise AnalysisError("need at least two bin edges")
    if not np.all(np.diff(edges) > 0):
        raise AnalysisError("bin edges must be strictly increasing")
    nb = len(edges) - 1
    idx = np.clip(np.searchsorted(edges, np.asarray(areas, dtype=float), side="right") - 1, 0, nb - 1)
    hit = np.asarray(matched, dtype=bool)
    counts = np.bincount(idx, minlength=nb)
    got = np.bincount(idx, weights=hit.astype(float), minlength=nb)
    return AreaCurve(edges.tolist(), counts.astype(int).tolist(), got.astype(int).tolist())


def instance_table(gt: FootprintSeries, tables: Iterable[MatchTable]) -> list[tuple[int, int, float, bool]]:
    """(frame, gt_id, area, matched) for every ground-truth footprint."""
    matched = {(t.frame, g) for t in tables for g, _, _ in t.pairs}
    return [(f.frame, f.building_id, f.area, (f.frame, f.building_id) in matched)
            for f in sorted(gt.footprints, key=lambda f: (f.frame, f.building_id))]


def recall_by_area(gt: FootprintSeries, tables: Iterable[MatchTable], bins: Sequence[float] = DEFAULT_AREA_BINS) -> AreaCurve:
    rows = instance_table(gt, tables)
    return recall_curve([r[2] for r in rows], [r[3] for r in rows], bins)


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation; raises on unequal lengths or zero variance."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise AnalysisError("pearson needs two equal-length series of at least 2 values")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise AnalysisError("zero variance: correlation undefined")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


FEATURES = ("gsd", "abs_latitude", "cos_latitude", "n_buildings", "track_f1", "change_f1", "scot", "detection_f1")


@dataclass
class FeatureTable:
    rows: list[dict]
    correlations: dict[tuple[str, str], float] = field(default_factory=dict)
    notices: list[str] = field(default_factory=list)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def to_csv(self) -> str:
        return _csv(self.rows, ["aoi_id", *FEATURES])

    def correlation_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", *FEATURES])
        for a in FEATURES:
            w.writerow([a] + [("NA" if (a, b) not in self.correlations else repr(self.correlations[(a, b)]))
                              for b in FEATURES])
        return buf.getvalue()


def feature_table(
    reports: Sequence[ScoreReport],
    metadata: Mapping[str, AoiMetadata],
    building_counts: Mapping[str, int] | None = None,
    check_gsd: bool = False,
) -> FeatureTable:
    """Per-AOI features with the full pairwise Pearson matrix (needs >= 3 AOIs)."""
    rows = []
    notices = []
    for r in sorted(reports, key=lambda r: r.aoi_id):
        m = metadata[r.aoi_id]
        if check_gsd:
            expect = 4.8 * math.cos(math.radians(m.latitude))
            if abs(m.gsd - expect) > 1e-6:
                raise AnalysisError(f"{r.aoi_id}: gsd {m.gsd} != 4.8*cos(lat) = {expect}")
        n = building_counts.get(r.aoi_id) if building_counts else None
        rows.append({
            "aoi_id": r.aoi_id,
            "gsd": m.gsd,
            "abs_latitude": abs(m.latitude),
            "cos_latitude": math.cos(math.radians(m.latitude)),
            "n_buildings": n if n is not None else r.detection.tp + r.detection.fn,
            "track_f1": r.track_f1,
            "change_f1": r.change_f1,
            "scot": r.scot,
            "detection_f1": r.detection_f1,
        })
    table = FeatureTable(rows, notices=notices)
    if len(rows) < 3:
        notices.append(f"correlations omitted: {len(rows)} AOIs (need >= 3)")
        return table
    for a in FEATURES:
        for b in FEATURES:
            try:
                table.correlations[(a, b)] = pearson(table.column(a), table.column(b))
            except AnalysisError:
                msg = f"zero variance in {a if np.ptp(table.column(a)) == 0 else b}: correlation omitted"
                if msg not in notices:
                    notices.append(msg)
    return table


def change_vs_track_table(reports: Sequence[tuple[str, ScoreReport]]) -> list[dict]:
    """One scatter row per (model, AOI)."""
    if not reports:
        raise AnalysisError("need at least one report")
    rows = [{"model": m, "aoi_id": r.aoi_id, "track_f1": r.track_f1, "change_f1": r.change_f1, "scot": r.scot}
            for m, r in reports]
    rows.sort(key=lambda r: (r["model"], r["aoi_id"]))
    return rows


def scot_contours(combiner: str = "harmonic", n: int = 11, weight: float = 0.5) -> list[dict]:
    """SCOT values over an n x n grid of (track, change), for contour reference."""
    grid = np.linspace(0, 1, n)
    return [{"track_f1": float(a), "change_f1": float(b), "scot": scot_score(float(a), float(b), combiner, weight)}
            for a in grid for b in grid]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def _csv(rows: Sequence[Mapping], cols: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in cols])
    return buf.getvalue()


def rows_to_csv(rows: Sequence[Mapping]) -> str:
    if not rows:
        return ""
    return _csv(rows, list(rows[0].keys()))


# ---------------------------------------------------------------------------
# minimal SVG output

_W, _H, _PAD = 480, 360, 48
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def _axes(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="16" text-anchor="middle" font-size="13">{escape(title)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD / 2}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_PAD}" y2="{_PAD / 2}" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_H - 10}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{_H / 2}" transform="rotate(-90 12 {_H / 2})" text-anchor="middle">{escape(ylabel)}</text>',
    ]


def _sx(u: float) -> float:
    return _PAD + u * (_W - 1.5 * _PAD)


def _sy(v: float) -> float:
    return _H - _PAD - v * (_H - 1.5 * _PAD)


def svg_area_curve(curves: Mapping[str, AreaCurve], title: str = "Recall vs area") -> str:
    """Recall against log10 bin centre, one polyline per named curve."""
    out = _axes(title, "log10 area", "recall")
    lo = min(math.log10(c.edges[0]) for c in curves.values()) if curves else 0
    hi = max(math.log10(c.edges[-1]) for c in curves.values()) if curves else 1
    span = (hi - lo) or 1.0
    for i, (name, c) in enumerate(sorted(curves.items())):
        pts = []
        for k, r in enumerate(c.recall):
            if r is None:
                continue
            mid = 0.5 * (math.log10(c.edges[k]) + math.log10(c.edges[k + 1]))
            pts.append(f"{_sx((mid - lo) / span):.2f},{_sy(r):.2f}")
        color = _COLORS[i % len(_COLORS)]
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(pts)}"/>')
        out.append(f'<text x="{_W - _PAD * 2}" y="{_PAD + 14 * i}" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_scatter(rows: Sequence[Mapping], title: str = "Change vs track") -> str:
    out = _axes(title, "track score", "change score")
    models = sorted({r["model"] for r in rows})
    for r in rows:
        color = _COLORS[models.index(r["model"]) % len(_COLORS)]
        out.append(f'<circle cx="{_sx(r["track_f1"]):.2f}" cy="{_sy(r["change_f1"]):.2f}" r="3" fill="{color}">'
                   f'<title>{escape(str(r["model"]))} {escape(str(r["aoi_id"]))}</title></circle>')
    for i, m in enumerate(models):
        out.append(f'<text x="{_W - _PAD * 2}" y="{_PAD + 14 * i}" fill="{_COLORS[i % len(_COLORS)]}">{escape(m)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
