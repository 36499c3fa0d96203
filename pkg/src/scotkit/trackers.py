"""Footprint trackers that turn probability cubes into id-tagged footprint series.

``baseline_track`` thresholds every frame on its own and links footprints to
the previous frame by IoU. ``temporal_collapse_track`` fixes each building's
outline once from the time-collapsed map and then estimates the frame in
which it appears by fitting a step to its mean interior probability.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .ingest import AoiMetadata, Footprint, FootprintSeries
from .matching import MatchConfig, match_frame
from .raster import (
    ProbabilityCube,
    WatershedParams,
    connected_components,
    polygonize,
    upsample,
    watershed_instances,
)

log = logging.getLogger(__name__)

NEVER = -1


@dataclass(frozen=True)
class TrackerParams:
    upsample_factor: int = 3
    upsample_mode: str = "bilinear"
    mask_threshold: float = 0.5
    link_iou: float = 0.25
    watershed: WatershedParams = field(
        default_factory=lambda: WatershedParams(seed_threshold=0.2, t_min=0.2, alpha=0.5)
    )
    keep_min_prob: float = 0.3
    collapse_op: str = "mean"
    valid_frac: float = 0.5
    min_region_px: int = 1

    def __post_init__(self):
        for name in ("mask_threshold", "link_iou", "keep_min_prob", "valid_frac"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if int(self.upsample_factor) != self.upsample_factor or self.upsample_factor < 1:
            raise ValueError("upsample_factor must be an integer >= 1")


@dataclass
class OriginEstimate:
    origin: int  # frame index, or NEVER
    series: np.ndarray
    fit_error: float
    level: float = 0.0  # fitted post-origin mean

    @property
    def never(self) -> bool:
        return self.origin == NEVER


def step_fit_many(p: np.ndarray, valid: np.ndarray, keep_min_prob: float = 0.0):
    """Vectorised step fit over rows of ``p`` (N x T).

    Returns ``(origin, sse, level)`` arrays; origin is ``NEVER`` for rows best
    explained by the all-zero model or whose fitted level is below
    ``keep_min_prob``. Ties go to NEVER, then to the smaller origin.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    v = np.atleast_2d(np.asarray(valid, dtype=bool))
    if v.shape != p.shape:
        raise ValueError("valid flags must match the series shape")
    if len(p) and not v.any(axis=1).all():
        raise ValueError("step_fit needs at least one valid frame")
    if len(p) > _CHUNK:
        parts = [_step_fit_block(p[i:i + _CHUNK], v[i:i + _CHUNK], keep_min_prob) for i in range(0, len(p), _CHUNK)]
        return tuple(np.concatenate(x) for x in zip(*parts))
    return _step_fit_block(p, v, keep_min_prob)


_CHUNK = 4096


def _step_fit_block(p: np.ndarray, v: np.ndarray, keep_min_prob: float):
    n, t = p.shape
    pz = np.where(v, p, 0.0)
    ks = np.arange(t)
    after = ks[None, :, None] <= ks[None, None, :]  # (1, k, t): frame t is at/after origin k
    vk = v[:, None, :] & after  # (n, k, t)
    cnt = vk.sum(axis=2)
    level = np.divide((pz[:, None, :] * vk).sum(axis=2), cnt, out=np.zeros((n, t)), where=cnt > 0)
    model = np.where(after, level[:, :, None], 0.0)
    resid = np.where(v[:, None, :], pz[:, None, :] - model, 0.0)
    sse_k = (resid**2).sum(axis=2)
    sse_k = np.where(cnt > 0, sse_k, np.inf)
    sse_never = (pz**2).sum(axis=1)
    best_k = np.argmin(sse_k, axis=1)  # first minimum: smaller origin wins ties
    best = sse_k[np.arange(n), best_k]
    lvl = level[np.arange(n), best_k]
    origin = np.where(best < sse_never, best_k, NEVER)
    origin = np.where((origin != NEVER) & (lvl < keep_min_prob), NEVER, origin)
    sse = np.where(origin == NEVER, sse_never, best)
    lvl = np.where(origin == NEVER, 0.0, lvl)
    return origin.astype(int), sse, lvl


def step_fit(series, valid=None, keep_min_prob: float = 0.0) -> OriginEstimate:
    """Estimate the frame at which a building appears from its mean probability series."""
    p = np.asarray(series, dtype=np.float64)
    v = np.ones(p.shape, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    origin, sse, lvl = step_fit_many(p[None, :], v[None, :], keep_min_prob)
    return OriginEstimate(int(origin[0]), p, float(sse[0]), float(lvl[0]))


def _series(cube: ProbabilityCube, metadata: AoiMetadata | None, aoi_id: str, footprints) -> FootprintSeries:
    t, h, w = cube.shape
    if metadata is None:
        metadata = AoiMetadata(gsd=cube.transform.gsd, width=w, height=h)
    return FootprintSeries(aoi_id, t, footprints, metadata)


def baseline_track(
    cube: ProbabilityCube,
    params: TrackerParams = TrackerParams(),
    aoi_id: str = "aoi",
    metadata: AoiMetadata | None = None,
) -> FootprintSeries:
    """Per-frame threshold + connected components, ids carried over by IoU to the previous frame."""
    link = MatchConfig(iou_threshold=max(params.link_iou, 1e-12), strategy="greedy")
    next_id = 0
    prev: list[Footprint] = []
    out: list[Footprint] = []
    for t in range(cube.shape[0]):
        frame = np.where(cube.valid[t], cube.values[t], 0.0)
        labels = connected_components(frame >= params.mask_threshold, 4)
        polys = [(lab, poly) for lab, poly in polygonize(labels, cube.transform)]
        if params.min_region_px > 1:
            sizes = np.bincount(labels.ravel())
            polys = [(lab, poly) for lab, poly in polys if sizes[lab] >= params.min_region_px]
        cur = [Footprint(t, lab, poly) for lab, poly in polys]
        table = match_frame(prev, cur, link, frame=t)
        inherited = {p: g for g, p, _ in table.pairs}
        assigned = []
        for fp in cur:
            bid = inherited.get(fp.building_id)
            if bid is None:
                bid = next_id
                next_id += 1
            assigned.append(Footprint(t, bid, fp.polygon))
        next_id = max([next_id] + [f.building_id + 1 for f in assigned])
        out.extend(assigned)
        prev = assigned
    return _series(cube, metadata, aoi_id, out)


def _upsampled_frames(cube: ProbabilityCube, params: TrackerParams):
    f = int(params.upsample_factor)
    for t in range(cube.shape[0]):
        vals = upsample(cube.values[t], f, params.upsample_mode)
        valid = upsample(cube.valid[t], f, "nearest") if f > 1 else cube.valid[t]
        yield t, vals, valid


def collapse_upsampled(cube: ProbabilityCube, params: TrackerParams = TrackerParams()) -> np.ndarray:
    """Masked temporal collapse of the upsampled frames, one frame in memory at a time."""
    total = count = peak = None
    for _, vals, valid in _upsampled_frames(cube, params):
        if total is None:
            total = np.zeros(vals.shape)
            count = np.zeros(vals.shape, dtype=np.int32)
            peak = np.zeros(vals.shape, dtype=np.float32)
        total += np.where(valid, vals, 0.0)
        count += valid
        np.maximum(peak, np.where(valid, vals, 0.0), out=peak)
    if total is None:
        raise ValueError("cube has no frames")
    if params.collapse_op == "max":
        return peak
    return np.divide(total, count, out=np.zeros(total.shape), where=count > 0).astype(np.float32)


def temporal_collapse_track(
    cube: ProbabilityCube,
    params: TrackerParams = TrackerParams(),
    aoi_id: str = "aoi",
    metadata: AoiMetadata | None = None,
) -> FootprintSeries:
    """Fixed outlines from the collapsed map, per-building origin from a step fit."""
    f = int(params.upsample_factor)
    t_count = cube.shape[0]
    collapsed = collapse_upsampled(cube, params)
    labels = watershed_instances(collapsed, params.watershed)
    n = int(labels.max())
    if n == 0:
        return _series(cube, metadata, aoi_id, [])
    outlines: dict[int, object] = {}
    for lab, poly in polygonize(labels, cube.transform.scaled(f)):
        # an 8-connected region can trace into several pieces; keep the largest
        if lab not in outlines or poly.area > outlines[lab].area:
            outlines[lab] = poly
    flat = labels.ravel()
    size = np.bincount(flat, minlength=n + 1).astype(np.float64)
    means = np.zeros((n, t_count))
    valid = np.zeros((n, t_count), dtype=bool)
    for t, vals, vmask in _upsampled_frames(cube, params):
        vm = vmask.ravel()
        vsum = np.bincount(flat, weights=np.where(vm, vals.ravel(), 0.0), minlength=n + 1)
        vcnt = np.bincount(flat, weights=vm.astype(np.float64), minlength=n + 1)
        means[:, t] = np.divide(vsum, vcnt, out=np.zeros(n + 1), where=vcnt > 0)[1:]
        valid[:, t] = (vcnt[1:] > 0) & (vcnt[1:] >= params.valid_frac * size[1:])
    # a building never seen under clear sky is fitted on whatever pixels were visible
    none_valid = ~valid.any(axis=1)
    valid[none_valid] = True
    origin, _, _ = step_fit_many(means, valid, params.keep_min_prob)
    out = []
    for lab in range(1, n + 1):
        k = int(origin[lab - 1])
        if k == NEVER or lab not in outlines:
            continue
        poly = outlines[lab]
        out.extend(Footprint(t, lab, poly) for t in range(k, t_count))
    return _series(cube, metadata, aoi_id, out)
