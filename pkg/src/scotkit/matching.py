"""Per-frame matching of proposal footprints to ground truth under an IoU threshold."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import shapely
from scipy.optimize import linear_sum_assignment
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .geometry import pairwise_iou
from .ingest import Footprint

STRATEGIES = ("greedy", "optimal")


@dataclass(frozen=True)
class MatchConfig:
    iou_threshold: float = 0.25
    strategy: str = "greedy"

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError(f"iou_threshold must be in (0, 1], got {self.iou_threshold}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


@dataclass
class MatchTable:
    frame: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    unmatched_gt: list[int] = field(default_factory=list)
    unmatched_prop: list[int] = field(default_factory=list)

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.unmatched_prop)

    @property
    def fn(self) -> int:
        return len(self.unmatched_gt)


def f1(tp: int, fp: int, fn: int) -> float:
    """2tp / (2tp + fp + fn), with 0.0 for an empty denominator."""
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


class GridIndex:
    """Uniform grid over bounding boxes, used to prune candidate pairs.

    Each box is registered in every cell it touches; a query returns the
    indices of stored boxes that share a cell with the query box.
    """

    def __init__(self, bounds: np.ndarray, cell_size: float | None = None):
        self.bounds = np.asarray(bounds, dtype=float).reshape(-1, 4)
        if cell_size is None:
            if len(self.bounds):
                extent = np.maximum(self.bounds[:, 2] - self.bounds[:, 0], self.bounds[:, 3] - self.bounds[:, 1])
                cell_size = float(np.median(extent)) * 2
            cell_size = cell_size or 1.0
        self.cell_size = cell_size
        self.cells: dict[tuple[int, int], list[int]] = defaultdict(list)
        for i, b in enumerate(self.bounds):
            for cell in self._cells(b):
                self.cells[cell].append(i)

    def _cells(self, b):
        s = self.cell_size
        x0, y0 = math.floor(b[0] / s), math.floor(b[1] / s)
        x1, y1 = math.floor(b[2] / s), math.floor(b[3] / s)
        for cx in range(x0, x1 + 1):
            for cy in range(y0, y1 + 1):
                yield cx, cy

    def query(self, b) -> set[int]:
        out: set[int] = set()
        for cell in self._cells(b):
            hits = self.cells.get(cell)
            if hits:
                out.update(hits)
        return out


def candidate_pairs(gt_bounds: np.ndarray, prop_bounds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs (gt, prop) whose bounding boxes overlap."""
    gt_bounds = np.asarray(gt_bounds, dtype=float).reshape(-1, 4)
    prop_bounds = np.asarray(prop_bounds, dtype=float).reshape(-1, 4)
    if not len(gt_bounds) or not len(prop_bounds):
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    index = GridIndex(gt_bounds)
    gi, pj = [], []
    for j, b in enumerate(prop_bounds):
        for i in index.query(b):
            g = gt_bounds[i]
            if g[0] <= b[2] and b[0] <= g[2] and g[1] <= b[3] and b[1] <= g[3]:
                gi.append(i)
                pj.append(j)
    gi_arr, pj_arr = np.array(gi, dtype=int), np.array(pj, dtype=int)
    order = np.lexsort((pj_arr, gi_arr))
    return gi_arr[order], pj_arr[order]


def _greedy(edges: list[tuple[float, int, int]]) -> list[tuple[int, int, float]]:
    edges = sorted(edges, key=lambda e: (-e[0], e[1], e[2]))
    used_g, used_p, out = set(), set(), []
    for v, g, p in edges:
        if g in used_g or p in used_p:
            continue
        used_g.add(g)
        used_p.add(p)
        out.append((g, p, v))
    return out


def _optimal(edges: list[tuple[float, int, int]]) -> list[tuple[int, int, float]]:
    """Maximum-cardinality matching, ties broken by maximum total IoU."""
    if not edges:
        return []
    gids = sorted({e[1] for e in edges})
    pids = sorted({e[2] for e in edges})
    gpos = {g: i for i, g in enumerate(gids)}
    ppos = {p: i for i, p in enumerate(pids)}
    rows = np.array([gpos[e[1]] for e in edges])
    cols = np.array([ppos[e[2]] for e in edges]) + len(gids)
    n = len(gids) + len(pids)
    graph = coo_matrix((np.ones(len(edges)), (rows, cols)), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    by_comp = defaultdict(list)
    for e, r in zip(edges, rows):
        by_comp[comp[r]].append(e)
    out = []
    for c in sorted(by_comp):
        ce = by_comp[c]
        cg = sorted({e[1] for e in ce})
        cp = sorted({e[2] for e in ce})
        gi = {g: i for i, g in enumerate(cg)}
        pi = {p: i for i, p in enumerate(cp)}
        # every real edge outweighs any number of IoU increments, so cardinality wins first
        big = min(len(cg), len(cp)) + 1.0
        w = np.zeros((len(cg), len(cp)))
        real = np.zeros_like(w, dtype=bool)
        for v, g, p in ce:
            w[gi[g], pi[p]] = big + v
            real[gi[g], pi[p]] = True
        r, k = linear_sum_assignment(w, maximize=True)
        for a, b in zip(r, k):
            if real[a, b]:
                out.append((cg[a], cp[b], w[a, b] - big))
    # report the exact IoU values rather than big + v - big
    exact = {(g, p): v for v, g, p in edges}
    return [(g, p, exact[(g, p)]) for g, p, _ in out]


def match_frame(
    gt: Sequence[Footprint], props: Sequence[Footprint], cfg: MatchConfig = MatchConfig(), frame: int | None = None
) -> MatchTable:
    """Match one frame's proposals to its ground truth."""
    gt = sorted(gt, key=lambda f: f.building_id)
    props = sorted(props, key=lambda f: f.building_id)
    if frame is None:
        frame = gt[0].frame if gt else (props[0].frame if props else 0)
    edges: list[tuple[float, int, int]] = []
    if gt and props:
        gpoly = np.array([f.polygon for f in gt], dtype=object)
        ppoly = np.array([f.polygon for f in props], dtype=object)
        gi, pj = candidate_pairs(shapely.bounds(gpoly), shapely.bounds(ppoly))
        if len(gi):
            vals = pairwise_iou(gpoly[gi], ppoly[pj])
            keep = vals >= cfg.iou_threshold
            edges = [
                (float(v), gt[i].building_id, props[j].building_id)
                for v, i, j in zip(vals[keep], gi[keep], pj[keep])
            ]
    pairs = _greedy(edges) if cfg.strategy == "greedy" else _optimal(edges)
    pairs.sort(key=lambda t: (t[0], t[1]))
    mg = {g for g, _, _ in pairs}
    mp = {p for _, p, _ in pairs}
    return MatchTable(
        frame=frame,
        pairs=pairs,
        unmatched_gt=[f.building_id for f in gt if f.building_id not in mg],
        unmatched_prop=[f.building_id for f in props if f.building_id not in mp],
    )
