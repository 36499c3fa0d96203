"""Planar polygon primitives: construction, area, intersection and IoU.

Polygons are plain :class:`shapely.Polygon` objects. Construction goes through
:func:`make_polygon`, which merges near-duplicate vertices and validates the
rings, so everything downstream can assume well-formed input.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np
import shapely
from shapely import Polygon

DEDUP_TOL = 1e-9

__all__ = [
    "GeometryError",
    "Polygon",
    "make_polygon",
    "polygon_area",
    "intersection_area",
    "iou",
    "pairwise_iou",
    "rotate_ring",
    "polygon_rings",
    "box",
]


class GeometryError(ValueError):
    """Raised for rings that cannot form a valid footprint polygon."""


def _clean_ring(coords: Iterable[Sequence[float]], tol: float = DEDUP_TOL) -> list[tuple[float, float]]:
    pts = [(float(c[0]), float(c[1])) for c in coords]
    out: list[tuple[float, float]] = []
    for p in pts:
        if out and abs(p[0] - out[-1][0]) <= tol and abs(p[1] - out[-1][1]) <= tol:
            continue
        out.append(p)
    # closing vertex (or a near copy of the first one)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= tol and abs(out[0][1] - out[-1][1]) <= tol:
        out.pop()
    return out


def make_polygon(exterior: Iterable[Sequence[float]], holes: Iterable[Iterable[Sequence[float]]] = ()) -> Polygon:
    """Build a validated polygon from an exterior ring and optional holes.

    Rings may be open or closed. Consecutive vertices closer than ``1e-9``
    are merged. Raises :class:`GeometryError` for rings with fewer than three
    distinct vertices, zero area, self-intersections or misplaced holes.
    """
    shell = _clean_ring(exterior)
    if len(shell) < 3:
        raise GeometryError(f"degenerate ring: {len(shell)} distinct vertices (need >= 3)")
    rings = []
    for h in holes:
        ring = _clean_ring(h)
        if len(ring) < 3:
            raise GeometryError(f"degenerate hole: {len(ring)} distinct vertices (need >= 3)")
        rings.append(ring)
    poly = Polygon(shell, rings)
    if not poly.area > 0:
        raise GeometryError("polygon has zero area")
    if not poly.is_valid:
        raise GeometryError(f"invalid polygon: {shapely.is_valid_reason(poly)}")
    return poly


def box(x0: float, y0: float, x1: float, y1: float) -> Polygon:
    return make_polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def polygon_rings(p: Polygon) -> tuple[list[tuple[float, float]], list[list[tuple[float, float]]]]:
    """Open vertex lists (no closing vertex) of the exterior and each hole."""
    ext = [tuple(c) for c in p.exterior.coords[:-1]]
    holes = [[tuple(c) for c in r.coords[:-1]] for r in p.interiors]
    return ext, holes


def rotate_ring(p: Polygon, shift: int) -> Polygon:
    """Same polygon with the exterior vertex list cyclically rotated by ``shift``."""
    ext, holes = polygon_rings(p)
    shift %= len(ext)
    return Polygon(ext[shift:] + ext[:shift], holes)


def _ring_area(coords: np.ndarray) -> float:
    # shoelace on coordinates shifted to the first vertex, limits cancellation
    xy = coords - coords[0]
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(p: Polygon) -> float:
    """Area of the exterior minus holes; independent of ring orientation."""
    if len(p.exterior.coords) < 4:
        raise GeometryError("degenerate ring: fewer than 3 vertices")
    area = abs(_ring_area(np.asarray(p.exterior.coords)[:-1]))
    for ring in p.interiors:
        area -= abs(_ring_area(np.asarray(ring.coords)[:-1]))
    return area


def _order_pairs(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Put every pair in a canonical argument order so results are symmetric bit for bit."""
    if len(a) == 0:
        return a, b
    ka = shapely.to_wkb(a)
    kb = shapely.to_wkb(b)
    swap = np.array([x > y for x, y in zip(ka, kb)], dtype=bool)
    first = np.where(swap, b, a)
    second = np.where(swap, a, b)
    return first, second


def _intersection_areas(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    first, second = _order_pairs(a, b)
    hit = shapely.intersects(first, second)
    out = np.zeros(len(first), dtype=float)
    if hit.any():
        out[hit] = shapely.area(shapely.intersection(first[hit], second[hit]))
    return out


def intersection_area(a: Polygon, b: Polygon) -> float:
    """Area of the boolean intersection of two polygons (0 when disjoint)."""
    return float(_intersection_areas(np.array([a], dtype=object), np.array([b], dtype=object))[0])


def pairwise_iou(a: Sequence[Polygon] | np.ndarray, b: Sequence[Polygon] | np.ndarray) -> np.ndarray:
    """Element-wise IoU of two equal-length polygon sequences."""
    a = np.asarray(a, dtype=object)
    b = np.asarray(b, dtype=object)
    if a.shape != b.shape:
        raise ValueError("pairwise_iou needs equal-length inputs")
    if len(a) == 0:
        return np.zeros(0)
    inter = _intersection_areas(a, b)
    union = shapely.area(a) + shapely.area(b) - inter
    return np.clip(inter / union, 0.0, 1.0)


def iou(a: Polygon, b: Polygon) -> float:
    """Intersection over union; symmetric and equal to 1.0 for identical inputs."""
    return float(pairwise_iou([a], [b])[0])
