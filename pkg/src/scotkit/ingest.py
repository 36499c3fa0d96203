"""Loading and writing AOI footprint series in the monthly-mosaic directory layout.

Default layout of one AOI directory::

    <aoi>/labels/<stem>.geojson   one FeatureCollection per month
    <aoi>/udm/<stem>.geojson      optional cloud polygons for that month
    <aoi>/metadata.json           {"gsd", "latitude", "width", "height"}

Months are ordered by sorting label filenames; the ``YYYY_MM`` tag found in
each stem is only used to detect gaps in the monthly sequence.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import shapely

from .geometry import GeometryError, Polygon, make_polygon, polygon_area, polygon_rings

log = logging.getLogger(__name__)

DEFAULT_ID_KEY = "Id"
DEFAULT_OCCLUSION_FRAC = 0.5
GSD_AT_EQUATOR = 4.8


class IngestError(ValueError):
    """Malformed footprint document or AOI directory."""


@dataclass(frozen=True)
class Footprint:
    frame: int
    building_id: int
    polygon: Polygon

    @property
    def area(self) -> float:
        return polygon_area(self.polygon)


@dataclass
class AoiMetadata:
    gsd: float = GSD_AT_EQUATOR
    latitude: float = 0.0
    width: int = 1024
    height: int = 1024
    start_month: str | None = None
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self):
        if not self.gsd > 0:
            raise IngestError(f"gsd must be positive, got {self.gsd}")
        if abs(self.latitude) > 90:
            raise IngestError(f"latitude out of range: {self.latitude}")

    @classmethod
    def from_latitude(cls, latitude: float, **kw) -> "AoiMetadata":
        """Metadata whose gsd follows the Planet mosaic rule 4.8 m * cos(latitude)."""
        return cls(gsd=GSD_AT_EQUATOR * math.cos(math.radians(latitude)), latitude=latitude, **kw)

    def to_json(self) -> dict:
        out = {"gsd": self.gsd, "latitude": self.latitude, "width": self.width, "height": self.height}
        if self.start_month is not None:
            out["start_month"] = self.start_month
        if self.origin_x or self.origin_y:
            out["origin_x"] = self.origin_x
            out["origin_y"] = self.origin_y
        return out


@dataclass
class UdmMask:
    frame: int
    obscured: list[Polygon] = field(default_factory=list)


@dataclass
class FootprintSeries:
    aoi_id: str
    frames: int
    footprints: list[Footprint]
    metadata: AoiMetadata = field(default_factory=AoiMetadata)
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for fp in self.footprints:
            if not 0 <= fp.frame < self.frames:
                raise IngestError(f"{self.aoi_id}: frame {fp.frame} outside [0, {self.frames})")
            if fp.building_id < 0:
                raise IngestError(f"{self.aoi_id}: negative building id {fp.building_id}")
            key = (fp.frame, fp.building_id)
            if key in seen:
                raise IngestError(f"{self.aoi_id}: duplicate id {fp.building_id} in frame {fp.frame}")
            seen.add(key)

    def by_frame(self) -> list[list[Footprint]]:
        out: list[list[Footprint]] = [[] for _ in range(self.frames)]
        for fp in self.footprints:
            out[fp.frame].append(fp)
        for frame in out:
            frame.sort(key=lambda f: f.building_id)
        return out

    def building_ids(self) -> list[int]:
        return sorted({fp.building_id for fp in self.footprints})

    def first_frames(self) -> dict[int, int]:
        first: dict[int, int] = {}
        for fp in self.footprints:
            if fp.building_id not in first or fp.frame < first[fp.building_id]:
                first[fp.building_id] = fp.frame
        return first

    def relabel(self, mapping: Mapping[int, int]) -> "FootprintSeries":
        """Copy with every building id passed through ``mapping``."""
        fps = [Footprint(f.frame, int(mapping[f.building_id]), f.polygon) for f in self.footprints]
        return replace(self, footprints=fps, warnings=list(self.warnings))

    def with_footprints(self, footprints: list[Footprint]) -> "FootprintSeries":
        return replace(self, footprints=list(footprints), warnings=list(self.warnings))


# ---------------------------------------------------------------------------
# GeoJSON


def _polygon_from_geometry(geom, index: int) -> Polygon:
    if not isinstance(geom, dict):
        raise IngestError(f"missing geometry at feature {index}")
    gtype = geom.get("type")
    coords = geom.get("coordinates")
    if gtype == "MultiPolygon" and coords is not None and len(coords) == 1:
        gtype, coords = "Polygon", coords[0]
    if gtype != "Polygon":
        raise IngestError(f"unsupported geometry type {gtype!r} at feature {index}")
    if not coords:
        raise IngestError(f"empty polygon at feature {index}")
    try:
        return make_polygon(coords[0], coords[1:])
    except (GeometryError, TypeError, IndexError) as exc:
        raise IngestError(f"invalid polygon at feature {index}: {exc}") from exc


def _load_collection(document: str) -> list:
    try:
        doc = json.loads(document)
    except json.JSONDecodeError as exc:
        raise IngestError(f"malformed JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("type") != "FeatureCollection":
        raise IngestError("document is not a GeoJSON FeatureCollection")
    feats = doc.get("features")
    if not isinstance(feats, list):
        raise IngestError("FeatureCollection has no features list")
    return feats


def parse_footprints(document: str, id_key: str = DEFAULT_ID_KEY, frame: int = 0) -> list[Footprint]:
    """Parse a FeatureCollection of Polygon features into footprints of one frame."""
    out = []
    for i, feat in enumerate(_load_collection(document)):
        props = feat.get("properties") or {}
        if id_key not in props or props[id_key] is None:
            raise IngestError(f"missing id property at feature {i}")
        try:
            bid = int(props[id_key])
        except (TypeError, ValueError) as exc:
            raise IngestError(f"non-integer id property at feature {i}: {props[id_key]!r}") from exc
        if bid < 0:
            raise IngestError(f"negative id property at feature {i}")
        out.append(Footprint(frame, bid, _polygon_from_geometry(feat.get("geometry"), i)))
    return out


def parse_udm(document: str, frame: int = 0) -> UdmMask:
    feats = _load_collection(document)
    return UdmMask(frame, [_polygon_from_geometry(f.get("geometry"), i) for i, f in enumerate(feats)])


def _geometry(p: Polygon) -> dict:
    ext, holes = polygon_rings(p)
    rings = [ext] + holes
    return {"type": "Polygon", "coordinates": [[list(v) for v in r + r[:1]] for r in rings]}


def footprints_to_geojson(footprints: Iterable[Footprint], id_key: str = DEFAULT_ID_KEY) -> str:
    feats = [
        {"type": "Feature", "properties": {id_key: fp.building_id}, "geometry": _geometry(fp.polygon)}
        for fp in sorted(footprints, key=lambda f: f.building_id)
    ]
    return json.dumps({"type": "FeatureCollection", "features": feats})


def udm_to_geojson(mask: UdmMask) -> str:
    feats = [{"type": "Feature", "properties": {}, "geometry": _geometry(p)} for p in mask.obscured]
    return json.dumps({"type": "FeatureCollection", "features": feats})


# ---------------------------------------------------------------------------
# directory layout


@dataclass(frozen=True)
class Layout:
    labels_dir: str = "labels"
    udm_dir: str = "udm"
    metadata_file: str = "metadata.json"
    month_pattern: str = r"(\d{4})_(\d{2})"
    id_key: str = DEFAULT_ID_KEY
    stem_template: str = "global_monthly_{month}_mosaic_{aoi}"


def month_tag(start: str | None, offset: int) -> str:
    """``YYYY_MM`` tag ``offset`` months after ``start`` (default 2018_01)."""
    year, month = (2018, 1) if start is None else (int(start[:4]), int(start[5:7]))
    m = year * 12 + (month - 1) + offset
    return f"{m // 12:04d}_{m % 12 + 1:02d}"


def _month_index(stem: str, pattern: re.Pattern) -> int | None:
    m = pattern.search(stem)
    if m is None:
        return None
    return int(m.group(1)) * 12 + int(m.group(2)) - 1


def load_aoi(path: str | Path, layout: Layout = Layout()) -> tuple[FootprintSeries, list[UdmMask], AoiMetadata]:
    """Load one AOI directory into a ground-truth series, UDMs and metadata."""
    root = Path(path)
    label_files = sorted((root / layout.labels_dir).glob("*.geojson"))
    if not label_files:
        raise IngestError(f"no label files in {root / layout.labels_dir}")
    pattern = re.compile(layout.month_pattern)
    warnings = []
    months = [_month_index(f.stem, pattern) for f in label_files]
    if all(m is not None for m in months):
        gaps = [(a, b) for a, b in zip(months, months[1:]) if b - a != 1]
        if gaps:
            msg = f"{root.name}: non-contiguous months {gaps}; frames re-indexed densely"
            log.warning(msg)
            warnings.append(msg)

    meta_path = root / layout.metadata_file
    if meta_path.exists():
        raw = json.loads(meta_path.read_text())
        metadata = AoiMetadata(
            gsd=float(raw["gsd"]),
            latitude=float(raw["latitude"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
            start_month=raw.get("start_month"),
            origin_x=float(raw.get("origin_x", 0.0)),
            origin_y=float(raw.get("origin_y", 0.0)),
        )
    else:
        metadata = AoiMetadata()
    if metadata.start_month is None and months[0] is not None:
        metadata.start_month = f"{months[0] // 12:04d}_{months[0] % 12 + 1:02d}"

    footprints: list[Footprint] = []
    udms: list[UdmMask] = []
    for t, f in enumerate(label_files):
        try:
            footprints.extend(parse_footprints(f.read_text(), layout.id_key, frame=t))
        except IngestError as exc:
            raise IngestError(f"{f}: {exc}") from exc
        udm_file = root / layout.udm_dir / f.name
        udms.append(parse_udm(udm_file.read_text(), t) if udm_file.exists() else UdmMask(t))
    series = FootprintSeries(root.name, len(label_files), footprints, metadata, warnings)
    return series, udms, metadata


def write_aoi(
    path: str | Path,
    series: FootprintSeries,
    udms: Iterable[UdmMask] | None = None,
    layout: Layout = Layout(),
) -> Path:
    """Write ``series`` (and optional UDMs) as an AOI directory; returns the directory."""
    root = Path(path)
    (root / layout.labels_dir).mkdir(parents=True, exist_ok=True)
    frames = series.by_frame()
    stems = [
        layout.stem_template.format(month=month_tag(series.metadata.start_month, t), aoi=series.aoi_id)
        for t in range(series.frames)
    ]
    for t, stem in enumerate(stems):
        (root / layout.labels_dir / f"{stem}.geojson").write_text(footprints_to_geojson(frames[t], layout.id_key))
    if udms is not None:
        (root / layout.udm_dir).mkdir(parents=True, exist_ok=True)
        for mask in udms:
            (root / layout.udm_dir / f"{stems[mask.frame]}.geojson").write_text(udm_to_geojson(mask))
    meta = series.metadata.to_json()
    if "start_month" not in meta:
        meta["start_month"] = month_tag(None, 0)
    (root / layout.metadata_file).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def apply_udm(
    series: FootprintSeries, udms: Iterable[UdmMask], occlusion_frac: float = DEFAULT_OCCLUSION_FRAC
) -> FootprintSeries:
    """Drop footprints whose cloud-covered share of area exceeds ``occlusion_frac``."""
    if not 0 <= occlusion_frac <= 1:
        raise ValueError(f"occlusion_frac must be in [0, 1], got {occlusion_frac}")
    clouds = {}
    for m in udms:
        if m.obscured:
            clouds[m.frame] = shapely.union_all(np.array(m.obscured, dtype=object))
    if not clouds:
        return series.with_footprints(series.footprints)
    kept = []
    for fp in series.footprints:
        cloud = clouds.get(fp.frame)
        if cloud is not None and fp.polygon.intersects(cloud):
            covered = fp.polygon.intersection(cloud).area
            if covered > occlusion_frac * fp.polygon.area:
                continue
        kept.append(fp)
    return series.with_footprints(kept)
