"""Deterministic synthetic urban-growth scenes.

Randomness comes from numpy's PCG64 bit generator. Every consumer draws from
its own substream, seeded with ``SeedSequence([seed, stream])`` where
``stream`` is one of the ``STREAM_*`` constants below, so changing e.g. the
noise settings never changes building placement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import shapely

from .geometry import GeometryError, Polygon, make_polygon
from .ingest import AoiMetadata, Footprint, FootprintSeries, UdmMask, write_aoi
from .raster import ProbabilityCube, Transform, rasterize, rasterize_polygon, write_cube

STREAM_PLACEMENT = 0
STREAM_TIMING = 1
STREAM_RENDER = 2
STREAM_CLOUDS = 3
STREAM_PERTURB = 4


class SceneError(ValueError):
    pass


def rng_for(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class SceneConfig:
    seed: int = 0
    width: int = 256
    height: int = 256
    frames: int = 24
    n_buildings: int = 50
    size_range: tuple[float, float] = (4, 12)
    min_gap: float = 2.0
    frac_preexisting: float = 0.3
    construction_window: tuple[int, int] | None = None  # inclusive; default (1, frames - 5)
    latitude: float = 20.0
    max_rotation_deg: float = 0.0
    max_attempts: int | None = None
    aoi_id: str | None = None

    def __post_init__(self):
        if self.min_gap < 1:
            raise SceneError("min_gap must be >= 1 pixel")
        if not 0 <= self.frac_preexisting <= 1:
            raise SceneError("frac_preexisting must be in [0, 1]")
        if self.frames < 1 or self.width < 1 or self.height < 1 or self.n_buildings < 0:
            raise SceneError("frames, width and height must be positive and n_buildings >= 0")
        lo, hi = self.size_range
        if not 1 <= lo <= hi:
            raise SceneError("size_range must satisfy 1 <= low <= high")
        lo, hi = self.window
        if not 0 <= lo <= hi < self.frames:
            raise SceneError(f"construction window {self.window} outside [0, {self.frames})")

    @property
    def window(self) -> tuple[int, int]:
        if self.construction_window is not None:
            return tuple(self.construction_window)
        return (min(1, self.frames - 1), max(min(1, self.frames - 1), self.frames - 5))

    @property
    def name(self) -> str:
        return self.aoi_id or f"synth_{self.seed:04d}"

    @property
    def gsd(self) -> float:
        return 4.8 * math.cos(math.radians(self.latitude))


@dataclass(frozen=True)
class NoiseConfig:
    interior_mean: float = 0.9
    background_mean: float = 0.1
    sigma: float = 0.0
    seasonal_amplitude: float = 0.0
    cloud_count: int = 0
    cloud_size_range: tuple[float, float] = (8, 32)

    def __post_init__(self):
        if not self.interior_mean > self.background_mean:
            raise SceneError("interior_mean must exceed background_mean")
        if self.sigma < 0:
            raise SceneError("sigma must be >= 0")


@dataclass(frozen=True)
class PerturbConfig:
    drop_rate: float = 0.0
    id_swap_rate: float = 0.0
    vertex_jitter: float = 0.0
    origin_shift: int = 0
    origin_shift_rate: float = 1.0
    spurious_rate: float = 0.0

    def __post_init__(self):
        for name in ("drop_rate", "id_swap_rate", "origin_shift_rate", "spurious_rate"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise SceneError(f"{name} must be in [0, 1], got {v}")
        if self.vertex_jitter < 0:
            raise SceneError("vertex_jitter must be >= 0")


@dataclass
class EditLog:
    dropped: list[int] = field(default_factory=list)
    swapped: dict[int, tuple[int, int]] = field(default_factory=dict)  # old id -> (new id, frame)
    shifted: dict[int, tuple[int, int]] = field(default_factory=dict)  # id -> (old first, new first)
    jittered: list[int] = field(default_factory=list)
    spurious: dict[int, int] = field(default_factory=dict)  # id -> first frame


def transform_for(meta: AoiMetadata) -> Transform:
    return Transform(meta.gsd, meta.origin_x, meta.origin_y)


class _Placer:
    """Rejection sampler keeping every pair of rectangles at least ``gap`` apart."""

    def __init__(self, gap: float, cell: float):
        self.gap = gap
        self.cell = max(cell, 1.0)
        self.grid: dict[tuple[int, int], list[int]] = {}
        self.polys: list[Polygon] = []

    def _cells(self, b, pad):
        c = self.cell
        for cx in range(math.floor((b[0] - pad) / c), math.floor((b[2] + pad) / c) + 1):
            for cy in range(math.floor((b[1] - pad) / c), math.floor((b[3] + pad) / c) + 1):
                yield cx, cy

    def fits(self, poly: Polygon) -> bool:
        near = set()
        for cell in self._cells(poly.bounds, self.gap):
            near.update(self.grid.get(cell, ()))
        if not near:
            return True
        others = np.array([self.polys[i] for i in sorted(near)], dtype=object)
        return bool((shapely.distance(poly, others) >= self.gap).all())

    def add(self, poly: Polygon) -> None:
        idx = len(self.polys)
        self.polys.append(poly)
        for cell in self._cells(poly.bounds, 0):
            self.grid.setdefault(cell, []).append(idx)


def _rectangle(rng, cfg: SceneConfig, lo: float, hi: float) -> Polygon:
    w, h = rng.uniform(lo, hi, size=2)
    if cfg.max_rotation_deg == 0:
        w, h = round(w), round(h)
        x = rng.integers(1, max(2, cfg.width - w))
        y = rng.integers(1, max(2, cfg.height - h))
        return make_polygon([(x, y), (x + w, y), (x + w, y + h), (x, y + h)])
    ang = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    r = 0.5 * math.hypot(w, h)
    cx = rng.uniform(1 + r, max(2 + r, cfg.width - 1 - r))
    cy = rng.uniform(1 + r, max(2 + r, cfg.height - 1 - r))
    ca, sa = math.cos(ang), math.sin(ang)
    pts = [(cx + dx * ca - dy * sa, cy + dx * sa + dy * ca) for dx, dy in
           ((-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2))]
    return make_polygon(pts)


def _to_world(poly: Polygon, tr: Transform) -> Polygon:
    def conv(ring):
        xy = np.asarray(ring.coords)[:-1]
        wx, wy = tr.to_world(xy[:, 0], xy[:, 1])
        return list(zip(wx.tolist(), wy.tolist()))

    return make_polygon(conv(poly.exterior), [conv(r) for r in poly.interiors])


def place_rectangles(cfg: SceneConfig, rng: np.random.Generator, count: int, placer: _Placer) -> list[Polygon]:
    """Pixel-space rectangles, each at least ``min_gap`` from everything already placed."""
    attempts = 0
    limit = cfg.max_attempts or max(1000, 200 * count)
    out = []
    lo, hi = cfg.size_range
    while len(out) < count:
        if attempts >= limit:
            raise SceneError(
                f"could not place {count} buildings with min_gap={cfg.min_gap} after {attempts} attempts "
                f"({len(out)} placed)"
            )
        attempts += 1
        poly = _rectangle(rng, cfg, lo, hi)
        if placer.fits(poly):
            placer.add(poly)
            out.append(poly)
    return out


def generate_scene(cfg: SceneConfig) -> tuple[FootprintSeries, AoiMetadata]:
    """Ground-truth series of non-touching rectangles that appear once and persist."""
    meta = AoiMetadata.from_latitude(cfg.latitude, width=cfg.width, height=cfg.height, start_month="2018_01")
    tr = transform_for(meta)
    placer = _Placer(cfg.min_gap, cfg.size_range[1] * 1.5)
    pix = place_rectangles(cfg, rng_for(cfg.seed, STREAM_PLACEMENT), cfg.n_buildings, placer)
    timing = rng_for(cfg.seed, STREAM_TIMING)
    n = len(pix)
    n_pre = round(cfg.frac_preexisting * n)
    order = timing.permutation(n)
    lo, hi = cfg.window
    origins = timing.integers(lo, hi + 1, size=n)
    origins[order[:n_pre]] = 0
    footprints = []
    for bid, (poly, k) in enumerate(zip(pix, origins)):
        world = _to_world(poly, tr)
        footprints.extend(Footprint(t, bid, world) for t in range(int(k), cfg.frames))
    return FootprintSeries(cfg.name, cfg.frames, footprints, meta), meta


def _polygon_pixels(poly: Polygon, shape, tr: Transform, cache: dict):
    key = poly.wkb
    hit = cache.get(key)
    if hit is None:
        hit = rasterize_polygon(poly, shape, tr)
        cache[key] = hit
    return hit


def render_cube(
    gt: FootprintSeries, noise: NoiseConfig = NoiseConfig(), seed: int = 0
) -> tuple[ProbabilityCube, list[UdmMask]]:
    """Probability cube for ``gt``: interior/background levels, gaussian noise, seasonal offset, clouds."""
    if gt.frames < 1:
        raise SceneError("need at least one frame")
    meta = gt.metadata
    tr = transform_for(meta)
    shape = (meta.height, meta.width)
    rng = rng_for(seed, STREAM_RENDER)
    cloud_rng = rng_for(seed, STREAM_CLOUDS)
    phase = rng.uniform(0, 12)
    cache: dict = {}
    frames = gt.by_frame()
    values = np.empty((gt.frames,) + shape, dtype=np.float32)
    valid = np.ones((gt.frames,) + shape, dtype=bool)
    udms = []
    for t in range(gt.frames):
        inside = np.zeros(shape, dtype=bool)
        for fp in frames[t]:
            r, c = _polygon_pixels(fp.polygon, shape, tr, cache)
            inside[r, c] = True
        base = np.where(inside, noise.interior_mean, noise.background_mean)
        offset = noise.seasonal_amplitude * math.sin(2 * math.pi * (t + phase) / 12)
        frame = base + offset
        if noise.sigma > 0:
            frame = frame + rng.normal(0.0, noise.sigma, size=shape)
        clouds = []
        for _ in range(noise.cloud_count):
            size = cloud_rng.uniform(*noise.cloud_size_range, size=2)
            x = cloud_rng.uniform(0, meta.width - size[0])
            y = cloud_rng.uniform(0, meta.height - size[1])
            ring = [(x, y), (x + size[0], y), (x + size[0], y + size[1]), (x, y + size[1])]
            wx, wy = tr.to_world(np.array([p[0] for p in ring]), np.array([p[1] for p in ring]))
            clouds.append(make_polygon(list(zip(wx.tolist(), wy.tolist()))))
        if clouds:
            covered = rasterize(clouds, shape, tr)
            valid[t] = ~covered
            # cloud pixels carry garbage the trackers must ignore
            frame = np.where(covered, cloud_rng.uniform(0, 1, size=shape), frame)
        values[t] = np.clip(frame, 0.0, 1.0)
        udms.append(UdmMask(t, clouds))
    return ProbabilityCube(values, valid, tr), udms


def perturb_proposals(
    gt: FootprintSeries, cfg: PerturbConfig = PerturbConfig(), seed: int = 0
) -> tuple[FootprintSeries, EditLog]:
    """Controlled corruption of ground truth, with a log of every edit applied."""
    rng = rng_for(seed, STREAM_PERTURB)
    log = EditLog()
    tr = transform_for(gt.metadata)
    by_id: dict[int, list[Footprint]] = {}
    for fp in gt.footprints:
        by_id.setdefault(fp.building_id, []).append(fp)
    next_id = max(by_id, default=-1) + 1
    out: list[Footprint] = []
    for bid in sorted(by_id):
        fps = sorted(by_id[bid], key=lambda f: f.frame)
        u_drop, u_swap, u_shift = rng.uniform(size=3)
        if u_drop < cfg.drop_rate:
            log.dropped.append(bid)
            continue
        first = fps[0].frame
        if cfg.origin_shift and first > 0 and u_shift < cfg.origin_shift_rate:
            new_first = min(max(first + cfg.origin_shift, 0), gt.frames - 1)
            if new_first != first:
                log.shifted[bid] = (first, new_first)
                if new_first > first:
                    fps = [f for f in fps if f.frame >= new_first]
                else:
                    fps = [Footprint(t, bid, fps[0].polygon) for t in range(new_first, first)] + fps
        if cfg.vertex_jitter > 0:
            poly = fps[0].polygon
            ext = np.asarray(poly.exterior.coords)[:-1]
            jit = rng.uniform(-cfg.vertex_jitter, cfg.vertex_jitter, size=ext.shape) * tr.gsd
            try:
                moved = make_polygon(ext + jit)
            except GeometryError:
                moved = None
            if moved is not None:
                log.jittered.append(bid)
                fps = [Footprint(f.frame, bid, moved if f.polygon.equals_exact(poly, 0) else f.polygon) for f in fps]
        if u_swap < cfg.id_swap_rate and len(fps) >= 2:
            cut = int(rng.integers(1, len(fps)))
            swap_frame = fps[cut].frame
            log.swapped[bid] = (next_id, swap_frame)
            fps = fps[:cut] + [Footprint(f.frame, next_id, f.polygon) for f in fps[cut:]]
            next_id += 1
        out.extend(fps)
    if cfg.spurious_rate > 0:
        n_spur = round(cfg.spurious_rate * len(by_id))
        scfg = SceneConfig(width=gt.metadata.width, height=gt.metadata.height, frames=gt.frames,
                           n_buildings=0, latitude=gt.metadata.latitude)
        placer = _Placer(1.0, 16)
        seen = set()
        for fp in gt.footprints:
            if fp.building_id in seen:
                continue
            seen.add(fp.building_id)
            placer.add(_to_world_inverse(fp.polygon, tr))
        for poly in place_rectangles(scfg, rng, n_spur, placer):
            k = int(rng.integers(0, gt.frames))
            world = _to_world(poly, tr)
            log.spurious[next_id] = k
            out.extend(Footprint(t, next_id, world) for t in range(k, gt.frames))
            next_id += 1
    return gt.with_footprints(out), log


def _to_world_inverse(poly: Polygon, tr: Transform) -> Polygon:
    xy = np.asarray(poly.exterior.coords)[:-1]
    cx, cy = tr.to_grid(xy[:, 0], xy[:, 1])
    return make_polygon(list(zip(cx.tolist(), cy.tolist())))


def write_scene(
    path: str | Path, gt: FootprintSeries, udms: list[UdmMask] | None = None, cube: ProbabilityCube | None = None
) -> Path:
    """Write a scene in the ingest layout, plus the cube files when given."""
    root = write_aoi(path, gt, udms)
    if cube is not None:
        write_cube(root, cube, udm_ref="udm" if udms is not None else None)
    return root
