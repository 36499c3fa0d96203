"""Probability rasters: upsampling, temporal collapse, instance extraction and masks.

Pixel grid conventions: pixel ``(row, col)`` covers ``[col, col+1) x [row, row+1)``
in grid units and its centre sits at ``(col + 0.5, row + 0.5)``. A
:class:`Transform` maps grid units to world coordinates, north up.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage as ndi
from skimage.morphology import h_maxima
from skimage.segmentation import watershed

from .geometry import Polygon, make_polygon

CUBE_HEADER = "cube.json"
CUBE_DATA = "cube.bin"
CUBE_VALID = "cube_valid.bin"
CUBE_FORMAT = "scotkit-cube/1"


@dataclass(frozen=True)
class Transform:
    """Grid -> world: ``x = origin_x + col * gsd``, ``y = origin_y - row * gsd``."""

    gsd: float = 1.0
    origin_x: float = 0.0
    origin_y: float = 0.0

    def scaled(self, factor: int) -> "Transform":
        """Transform of the same extent sampled ``factor`` times finer."""
        return Transform(self.gsd / factor, self.origin_x, self.origin_y)

    def to_world(self, col, row):
        return self.origin_x + np.asarray(col) * self.gsd, self.origin_y - np.asarray(row) * self.gsd

    def to_grid(self, x, y):
        return (np.asarray(x) - self.origin_x) / self.gsd, (self.origin_y - np.asarray(y)) / self.gsd


@dataclass
class ProbabilityCube:
    values: np.ndarray
    valid: np.ndarray | None = None
    transform: Transform = field(default_factory=Transform)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError(f"cube must be T x H x W, got shape {self.values.shape}")
        if self.values.size and (self.values.min() < 0 or self.values.max() > 1 or np.isnan(self.values).any()):
            raise ValueError("cube values must lie in [0, 1]")
        if self.valid is None:
            self.valid = np.ones(self.values.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.values.shape:
                raise ValueError("valid mask shape does not match cube")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# cube file format: little-endian float32 (t, y, x) + JSON header


def write_cube(path: str | Path, cube: ProbabilityCube, udm_ref: str | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    t, h, w = cube.shape
    cube.values.astype("<f4").tofile(root / CUBE_DATA)
    header = {
        "format": CUBE_FORMAT,
        "frames": t,
        "height": h,
        "width": w,
        "dtype": "<f4",
        "order": "tyx",
        "data": CUBE_DATA,
        "transform": asdict(cube.transform),
        "udm": udm_ref,
        "valid_mask": None,
    }
    if not cube.valid.all():
        cube.valid.astype(np.uint8).tofile(root / CUBE_VALID)
        header["valid_mask"] = CUBE_VALID
    (root / CUBE_HEADER).write_text(json.dumps(header, indent=2, sort_keys=True))
    return root


class CubeFormatError(ValueError):
    pass


def read_cube(path: str | Path) -> ProbabilityCube:
    root = Path(path)
    try:
        header = json.loads((root / CUBE_HEADER).read_text())
        t, h, w = int(header["frames"]), int(header["height"]), int(header["width"])
        tr = Transform(**header.get("transform", {}))
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CubeFormatError(f"bad cube header in {root}: {exc}") from exc
    if header.get("dtype", "<f4") != "<f4" or header.get("order", "tyx") != "tyx":
        raise CubeFormatError(f"unsupported cube encoding in {root}")
    data = np.fromfile(root / header.get("data", CUBE_DATA), dtype="<f4")
    if data.size != t * h * w:
        raise CubeFormatError(f"cube data has {data.size} values, header says {t}x{h}x{w}")
    valid = None
    if header.get("valid_mask"):
        valid = np.fromfile(root / header["valid_mask"], dtype=np.uint8).reshape(t, h, w).astype(bool)
    return ProbabilityCube(data.reshape(t, h, w), valid, tr)


# ---------------------------------------------------------------------------
# rasterization


def _ring_crossings(ring: np.ndarray, rows: np.ndarray) -> list[np.ndarray]:
    """x positions where the ring crosses each horizontal line y = row + 0.5."""
    out = [[] for _ in rows]
    r0 = rows[0]
    n = len(ring)
    for k in range(n):
        x0, y0 = ring[k]
        x1, y1 = ring[(k + 1) % n]
        if y0 == y1:
            continue
        lo, hi = (y0, y1) if y0 < y1 else (y1, y0)
        # centres yc with lo <= yc < hi
        first = max(math.ceil(lo - 0.5), r0)
        last = min(math.ceil(hi - 0.5) - 1, rows[-1])
        for r in range(first, last + 1):
            yc = r + 0.5
            out[r - r0].append(x0 + (yc - y0) * (x1 - x0) / (y1 - y0))
    return [np.sort(np.array(c)) for c in out]


def rasterize_polygon(poly: Polygon, shape: tuple[int, int], transform: Transform = Transform()):
    """Pixels of ``shape`` whose centres fall inside ``poly`` (even-odd over all rings).

    Returns ``(rows, cols)`` index arrays.
    """
    h, w = shape
    rings = [poly.exterior] + list(poly.interiors)
    grid = []
    for ring in rings:
        xy = np.asarray(ring.coords)[:-1]
        cx, cy = transform.to_grid(xy[:, 0], xy[:, 1])
        grid.append(np.column_stack([cx, cy]))
    ys = np.concatenate([g[:, 1] for g in grid])
    r_lo = max(math.ceil(ys.min() - 0.5), 0)
    r_hi = min(math.ceil(ys.max() - 0.5) - 1, h - 1)
    if r_hi < r_lo:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    rows = np.arange(r_lo, r_hi + 1)
    per_ring = [_ring_crossings(g, rows) for g in grid]
    out_r, out_c = [], []
    for i, r in enumerate(rows):
        xs = np.sort(np.concatenate([pr[i] for pr in per_ring]))
        for a, b in zip(xs[0::2], xs[1::2]):
            c0 = max(math.ceil(a - 0.5), 0)
            c1 = min(math.ceil(b - 0.5) - 1, w - 1)
            if c1 >= c0:
                out_c.append(np.arange(c0, c1 + 1))
                out_r.append(np.full(c1 - c0 + 1, r))
    if not out_r:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    return np.concatenate(out_r), np.concatenate(out_c)


def rasterize(polys: Iterable[Polygon], shape: tuple[int, int], transform: Transform = Transform()) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for p in polys:
        r, c = rasterize_polygon(p, shape, transform)
        mask[r, c] = True
    return mask


def rasterize_labels(polys: Sequence[Polygon], shape: tuple[int, int], transform: Transform = Transform()) -> np.ndarray:
    """Label raster with polygon ``i`` drawn as ``i + 1``; later polygons win overlaps."""
    labels = np.zeros(shape, dtype=np.int32)
    for i, p in enumerate(polys):
        r, c = rasterize_polygon(p, shape, transform)
        labels[r, c] = i + 1
    return labels


# ---------------------------------------------------------------------------
# upsampling and collapse


def _linear_axis(n: int, factor: int):
    # half-pixel convention: output centre i maps to input coordinate (i + 0.5) / factor - 0.5
    u = (np.arange(n * factor) + 0.5) / factor - 0.5
    u = np.clip(u, 0, n - 1)
    i0 = np.floor(u).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    return i0, i1, (u - i0).astype(np.float32)


def upsample(image: np.ndarray, factor: int, mode: str = "bilinear") -> np.ndarray:
    """Enlarge a 2-D probability image ``factor`` times along both axes."""
    if int(factor) != factor or factor < 1:
        raise ValueError(f"upsample factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    img = np.asarray(image)
    if factor == 1:
        return img.copy()
    if mode == "nearest":
        return np.repeat(np.repeat(img, factor, axis=0), factor, axis=1)
    if mode != "bilinear":
        raise ValueError(f"unknown upsample mode {mode!r}")
    work = img.astype(np.float32)
    r0, r1, wr = _linear_axis(work.shape[0], factor)
    work = work[r0] * (1 - wr)[:, None] + work[r1] * wr[:, None]
    c0, c1, wc = _linear_axis(work.shape[1], factor)
    work = work[:, c0] * (1 - wc) + work[:, c1] * wc
    return np.clip(work, 0.0, 1.0)


def collapse_time(cube: ProbabilityCube, op: str = "mean") -> np.ndarray:
    """Per-pixel mean (or max) over valid frames; pixels never valid become 0."""
    vals, valid = cube.values, cube.valid
    count = valid.sum(axis=0)
    if op == "mean":
        total = np.where(valid, vals, 0).sum(axis=0, dtype=np.float64)
        out = np.divide(total, count, out=np.zeros(count.shape), where=count > 0)
    elif op == "max":
        out = np.where(valid, vals, 0).max(axis=0).astype(np.float64) if len(vals) else np.zeros(vals.shape[1:])
    else:
        raise ValueError(f"unknown collapse op {op!r}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# labelling


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 4:
        return ndi.generate_binary_structure(2, 1)
    if connectivity == 8:
        return ndi.generate_binary_structure(2, 2)
    raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")


def connected_components(binary: np.ndarray, connectivity: int = 4) -> np.ndarray:
    """Label foreground components 1..N, numbered by their first pixel in row-major order."""
    labels, _ = ndi.label(np.asarray(binary, dtype=bool), structure=_structure(connectivity))
    return labels.astype(np.int32)


def relabel_sequential(labels: np.ndarray) -> np.ndarray:
    """Renumber labels 1..N by first occurrence in row-major order."""
    flat = labels.ravel()
    ids, first = np.unique(flat, return_index=True)
    keep = ids != 0
    ids, first = ids[keep], first[keep]
    order = ids[np.argsort(first)]
    lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int32)
    lut[order] = np.arange(1, len(order) + 1, dtype=np.int32)
    return lut[labels]


@dataclass(frozen=True)
class WatershedParams:
    smooth_sigma: float = 1.5
    seed_threshold: float = 0.4
    t_min: float = 0.4
    alpha: float = 0.5
    connectivity: int = 4
    min_region_px: int = 1
    seed_merge_px: int = 2
    seed_prominence: float = 0.05

    def __post_init__(self):
        for name in ("seed_threshold", "t_min"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")
        if self.min_region_px < 1:
            raise ValueError("min_region_px must be >= 1")
        if self.smooth_sigma < 0 or self.seed_merge_px < 0 or self.seed_prominence < 0:
            raise ValueError("smooth_sigma, seed_merge_px and seed_prominence must be >= 0")


def _seeds(smooth: np.ndarray, domain: np.ndarray, params: WatershedParams) -> np.ndarray:
    work = np.where(domain, smooth, 0.0)
    if params.seed_prominence > 0:
        peaks = h_maxima(work, params.seed_prominence, footprint=ndi.generate_binary_structure(2, 2)).astype(bool)
    else:
        size = 2 * params.seed_merge_px + 1
        peaks = work == ndi.maximum_filter(work, size=size, mode="constant", cval=-1.0)
    peaks &= domain & (smooth > params.seed_threshold)
    if params.seed_merge_px > 0:
        # maxima closer than seed_merge_px (chebyshev) share a seed
        grown = ndi.binary_dilation(peaks, ndi.generate_binary_structure(2, 2), iterations=params.seed_merge_px // 2 or 1)
        markers = connected_components(grown & domain, 8) * peaks
    else:
        markers = connected_components(peaks, 8)
    # every domain component gets at least one seed, at its smoothed maximum
    comp = connected_components(domain, params.connectivity)
    n_comp = int(comp.max())
    if n_comp:
        seeded = np.zeros(n_comp + 1, dtype=bool)
        seeded[np.unique(comp[markers > 0])] = True
        missing = [i for i in range(1, n_comp + 1) if not seeded[i]]
        if missing:
            pos = ndi.maximum_position(smooth, comp, missing)
            nxt = int(markers.max()) + 1
            for k, (r, c) in enumerate(pos):
                if smooth[r, c] > params.seed_threshold:
                    markers[r, c] = nxt + k
    return markers.astype(np.int32)


def watershed_instances(prob_map: np.ndarray, params: WatershedParams = WatershedParams()) -> np.ndarray:
    """Seeded watershed with an adaptive per-region threshold.

    Seeds are prominent maxima of the smoothed map above ``seed_threshold``.
    Regions flood the smoothed map in order of decreasing probability inside
    ``prob >= t_min``; each region then keeps the connected part (containing
    its peak) of pixels with ``prob >= max(t_min, alpha * peak)``.
    """
    prob = np.asarray(prob_map, dtype=np.float64)
    smooth = ndi.gaussian_filter(prob, params.smooth_sigma, mode="nearest") if params.smooth_sigma > 0 else prob
    domain = prob >= params.t_min
    if params.t_min == 0:
        domain = prob > 0
    markers = _seeds(smooth, domain, params)
    if not markers.any():
        return np.zeros(prob.shape, dtype=np.int32)
    regions = watershed(-smooth, markers, mask=domain, connectivity=1 if params.connectivity == 4 else 2)
    out = np.zeros(prob.shape, dtype=np.int32)
    struct = _structure(params.connectivity)
    n = 0
    for lab, sl in enumerate(ndi.find_objects(regions), start=1):
        if sl is None:
            continue
        region = regions[sl] == lab
        vals = np.where(region, prob[sl], -1.0)
        peak_idx = np.unravel_index(np.argmax(vals), vals.shape)
        peak = vals[peak_idx]
        keep = region & (prob[sl] >= max(params.t_min, params.alpha * peak))
        comp, _ = ndi.label(keep, structure=struct)
        part = comp == comp[peak_idx]
        if part.sum() < params.min_region_px:
            continue
        n += 1
        out[sl][part] = n
    return relabel_sequential(out)


# ---------------------------------------------------------------------------
# polygonization

_STEP = ((1, 0), (0, 1), (-1, 0), (0, -1))  # +x, +y, -x, -y in grid units


def _boundary_edges(mask: np.ndarray):
    """Directed pixel-edge boundary of ``mask`` (padded by one pixel on every side).

    Each exterior ring runs clockwise on screen (y down), holes the other way.
    Returns a dict vertex -> list of (direction, next vertex).
    """
    m = mask
    out: dict[tuple[int, int], list[tuple[int, tuple[int, int]]]] = {}

    def add(ys, xs, d, dx0, dy0):
        sx, sy = _STEP[d]
        for y, x in zip(ys.tolist(), xs.tolist()):
            a = (x + dx0, y + dy0)
            out.setdefault(a, []).append((d, (a[0] + sx, a[1] + sy)))

    inner = m[1:-1, 1:-1]
    ys, xs = np.nonzero(inner & ~m[:-2, 1:-1])  # top side, heading +x
    add(ys + 1, xs + 1, 0, 0, 0)
    ys, xs = np.nonzero(inner & ~m[1:-1, 2:])  # right side, heading +y
    add(ys + 1, xs + 1, 1, 1, 0)
    ys, xs = np.nonzero(inner & ~m[2:, 1:-1])  # bottom side, heading -x
    add(ys + 1, xs + 1, 2, 1, 1)
    ys, xs = np.nonzero(inner & ~m[1:-1, :-2])  # left side, heading -y
    add(ys + 1, xs + 1, 3, 0, 1)
    return out


def _trace_rings(edges) -> list[list[tuple[int, int]]]:
    """Decompose the directed boundary into simple closed loops of corner vertices."""
    rings = []
    for start in sorted(edges):
        while edges.get(start):
            d, cur = edges[start].pop(0)
            verts, dirs = [start], [d]
            # boundary graphs are balanced, so the walk can only stop back at ``start``
            while edges.get(cur):
                options = edges[cur]
                pick = 0
                for want in ((d + 1) % 4, d, (d + 3) % 4):
                    hit = [k for k, (od, _) in enumerate(options) if od == want]
                    if hit:
                        pick = hit[0]
                        break
                od, nxt = options.pop(pick)
                verts.append(cur)
                dirs.append(od)
                d, cur = od, nxt
            rings.extend(_split_loops(verts, dirs))
    return rings


def _split_loops(verts, dirs):
    """Split a closed vertex walk that revisits vertices into simple loops, then drop collinear vertices."""
    loops = []
    stack_v, stack_d, seen = [], [], {}
    for v, d in zip(verts, dirs):
        if v in seen:
            i = seen[v]
            loops.append((stack_v[i:], stack_d[i:]))
            for u in stack_v[i:]:
                del seen[u]
            del stack_v[i:]
            del stack_d[i:]
        seen[v] = len(stack_v)
        stack_v.append(v)
        stack_d.append(d)
    if stack_v:
        loops.append((stack_v, stack_d))
    out = []
    for lv, ld in loops:
        n = len(lv)
        # vertex i is a corner when the incoming direction (ld[i-1]) differs from the outgoing one
        corners = [lv[i] for i in range(n) if ld[i - 1] != ld[i]]
        if len(corners) >= 4:
            out.append(corners)
    return out


def _signed_area(ring) -> float:
    a = 0.0
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        a += x0 * y1 - x1 * y0
    return a / 2


def _point_in_ring(x: float, y: float, ring) -> bool:
    inside = False
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        if (y0 > y) != (y1 > y) and x < x0 + (y - y0) * (x1 - x0) / (y1 - y0):
            inside = not inside
    return inside


def mask_to_polygons(mask: np.ndarray, offset: tuple[int, int] = (0, 0), transform: Transform = Transform()) -> list[Polygon]:
    """Polygons (one per 4-connected piece) tracing the pixel edges of ``mask``.

    ``offset`` is the (row, col) of ``mask[0, 0]`` in the full grid.
    """
    padded = np.pad(np.asarray(mask, dtype=bool), 1)
    rings = _trace_rings(_boundary_edges(padded))
    shells, holes = [], []
    for r in rings:
        (shells if _signed_area(r) > 0 else holes).append(r)
    assigned: list[list] = [[] for _ in shells]
    for h in holes:
        # any hole corner is strictly inside or on its shell; test the centre of a hole pixel instead
        (x0, y0), (x1, y1) = h[0], h[1]
        px = (x0 + x1) / 2 + (0 if x0 != x1 else (-0.5 if y1 > y0 else 0.5))
        py = (y0 + y1) / 2 + (0 if y0 != y1 else (0.5 if x1 > x0 else -0.5))
        for i, s in enumerate(shells):
            if _point_in_ring(px, py, s):
                assigned[i].append(h)
                break
    oy, ox = offset
    out = []
    for s, hs in zip(shells, assigned):
        def world(ring):
            xs = np.array([v[0] for v in ring], dtype=float) - 1 + ox
            ys = np.array([v[1] for v in ring], dtype=float) - 1 + oy
            wx, wy = transform.to_world(xs, ys)
            return list(zip(wx.tolist(), wy.tolist()))

        out.append(make_polygon(world(s), [world(h) for h in hs]))
    return out


def polygonize(labels: np.ndarray, transform: Transform = Transform()) -> list[tuple[int, Polygon]]:
    """Trace every labelled region into world-coordinate polygons, sorted by label."""
    out = []
    for lab, sl in enumerate(ndi.find_objects(np.asarray(labels)), start=1):
        if sl is None:
            continue
        mask = labels[sl] == lab
        for poly in mask_to_polygons(mask, (sl[0].start, sl[1].start), transform):
            out.append((lab, poly))
    return out


# ---------------------------------------------------------------------------
# fbc training masks


def fbc_masks(
    footprints: Sequence[Polygon],
    shape: tuple[int, int],
    transform: Transform = Transform(),
    boundary_px: int = 2,
    contact_px: int = 2,
) -> np.ndarray:
    """3 x H x W uint8 mask: footprint interiors, inner boundary band, contact zones.

    The boundary band holds footprint pixels within ``boundary_px`` (euclidean,
    pixel centres) of a pixel outside that footprint. Contact pixels lie within
    ``contact_px`` of at least two distinct footprints.
    """
    if boundary_px < 1 or contact_px < 1:
        raise ValueError("boundary_px and contact_px must be >= 1")
    h, w = shape
    out = np.zeros((3, h, w), dtype=np.uint8)
    near = np.zeros(shape, dtype=np.int32)
    pad = int(math.ceil(max(boundary_px, contact_px))) + 1
    for poly in footprints:
        rr, cc = rasterize_polygon(poly, shape, transform)
        if not len(rr):
            continue
        out[0, rr, cc] = 1
        r0, r1 = max(rr.min() - pad, 0), min(rr.max() + pad + 1, h)
        c0, c1 = max(cc.min() - pad, 0), min(cc.max() + pad + 1, w)
        own = np.zeros((r1 - r0 + 2 * pad, c1 - c0 + 2 * pad), dtype=bool)
        own[rr - r0 + pad, cc - c0 + pad] = True
        inside = ndi.distance_transform_edt(own)  # distance to nearest pixel outside
        outside = ndi.distance_transform_edt(~own)  # distance to nearest footprint pixel
        crop = (slice(pad, pad + r1 - r0), slice(pad, pad + c1 - c0))
        band = own[crop] & (inside[crop] <= boundary_px)
        out[1, r0:r1, c0:c1] |= band.astype(np.uint8)
        near[r0:r1, c0:c1] += (outside[crop] <= contact_px).astype(np.int32)
    out[2] = (near >= 2).astype(np.uint8)
    return out


def write_masks(path: str | Path, masks: np.ndarray, transform: Transform = Transform()) -> None:
    """3-plane uint8 raster (``<path>.bin``) plus JSON header (``<path>.json``)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    np.ascontiguousarray(masks, dtype=np.uint8).tofile(p.with_suffix(".bin"))
    c, h, w = masks.shape
    header = {"format": "scotkit-fbc/1", "planes": ["footprint", "boundary", "contact"], "channels": c,
              "height": h, "width": w, "dtype": "u1", "order": "cyx", "transform": asdict(transform)}
    p.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def read_masks(path: str | Path) -> np.ndarray:
    p = Path(path)
    header = json.loads(p.with_suffix(".json").read_text())
    data = np.fromfile(p.with_suffix(".bin"), dtype=np.uint8)
    return data.reshape(header["channels"], header["height"], header["width"])
