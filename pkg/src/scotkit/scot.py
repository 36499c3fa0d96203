"""SCOT metric: a tracking term, a change-detection term and their combination.

Tracking term
    Frames are matched in chronological order. The first frame-level match
    between two not-yet-associated ids establishes the association
    ``prop_id <-> gt_id``. Later matches that agree with it are true
    positives; matches that contradict it are scored as an identity switch
    (FP + FN by default). Unmatched ground truth is FN, unmatched proposals FP.

Change term
    Only buildings whose first appearance is after frame 0 take part. A new
    ground-truth building is recovered when a new proposal building overlaps
    it (IoU at their first frames) and first appears within ``tol`` frames.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np
import shapely

from .geometry import pairwise_iou
from .ingest import DEFAULT_OCCLUSION_FRAC, FootprintSeries, UdmMask, apply_udm
from .matching import MatchConfig, MatchTable, _greedy, candidate_pairs, f1, match_frame

SCHEMA_VERSION = "scot-report/1"
COMBINERS = ("harmonic", "arithmetic", "weighted")
SWITCH_PENALTIES = ("double", "single")
EMPTY_CHANGE_NOTE = "no new buildings in either series: change_f1 = 0 by convention"


class ScoringError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreConfig:
    match: MatchConfig = field(default_factory=MatchConfig)
    tol_frames: int = 0
    combiner: str = "harmonic"
    weight: float = 0.5
    switch_penalty: str = "double"
    occlusion_frac: float = DEFAULT_OCCLUSION_FRAC

    def __post_init__(self):
        if self.combiner not in COMBINERS:
            raise ValueError(f"unknown combiner {self.combiner!r}; expected one of {COMBINERS}")
        if self.switch_penalty not in SWITCH_PENALTIES:
            raise ValueError(f"unknown switch_penalty {self.switch_penalty!r}")
        if self.tol_frames < 0:
            raise ValueError("tol_frames must be >= 0")
        if not 0 <= self.weight <= 1:
            raise ValueError("weight must be in [0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["match"] = asdict(self.match)
        return d


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def f1(self) -> float:
        return f1(self.tp, self.fp, self.fn)


@dataclass
class Association:
    """Injective prop_id -> gt_id mapping with the frame each link was made."""

    prop_to_gt: dict[int, int] = field(default_factory=dict)
    gt_to_prop: dict[int, int] = field(default_factory=dict)
    established: dict[tuple[int, int], int] = field(default_factory=dict)

    def link(self, prop_id: int, gt_id: int, frame: int) -> None:
        self.prop_to_gt[prop_id] = gt_id
        self.gt_to_prop[gt_id] = prop_id
        self.established[(prop_id, gt_id)] = frame


@dataclass
class TrackResult:
    f1: float
    counts: Counts
    association: Association
    switches: int
    tables: list[MatchTable]


def _check_frames(gt: FootprintSeries, props: FootprintSeries) -> None:
    if gt.frames != props.frames:
        raise ScoringError(f"{gt.aoi_id}: frame count mismatch (gt {gt.frames}, proposals {props.frames})")


def match_series(gt: FootprintSeries, props: FootprintSeries, cfg: MatchConfig = MatchConfig()) -> list[MatchTable]:
    _check_frames(gt, props)
    gf, pf = gt.by_frame(), props.by_frame()
    return [match_frame(gf[t], pf[t], cfg, frame=t) for t in range(gt.frames)]


def track_score(
    gt: FootprintSeries,
    props: FootprintSeries,
    cfg: MatchConfig = MatchConfig(),
    switch_penalty: str = "double",
    tables: list[MatchTable] | None = None,
) -> TrackResult:
    """Tracking F1 over all frame-level instances with consistent-id association."""
    _check_frames(gt, props)
    if tables is None:
        tables = match_series(gt, props, cfg)
    assoc = Association()
    c = Counts()
    switches = 0
    for table in tables:
        c.fn += len(table.unmatched_gt)
        c.fp += len(table.unmatched_prop)
        for g, p, _ in table.pairs:
            known_g = assoc.prop_to_gt.get(p)
            known_p = assoc.gt_to_prop.get(g)
            if known_g is None and known_p is None:
                assoc.link(p, g, table.frame)
                c.tp += 1
            elif known_g == g:
                c.tp += 1
            else:
                switches += 1
                c.fp += 1
                if switch_penalty == "double":
                    c.fn += 1
    return TrackResult(c.f1, c, assoc, switches, tables)


def detection_counts(tables: Iterable[MatchTable]) -> Counts:
    c = Counts()
    for t in tables:
        c.tp += t.tp
        c.fp += t.fp
        c.fn += t.fn
    return c


def _first_appearances(series: FootprintSeries):
    """building_id -> (first frame, polygon at that frame), for buildings first seen after frame 0."""
    first = {}
    for fp in series.footprints:
        cur = first.get(fp.building_id)
        if cur is None or fp.frame < cur.frame:
            first[fp.building_id] = fp
    return {bid: fp for bid, fp in sorted(first.items()) if fp.frame > 0}


def change_score(
    gt: FootprintSeries, props: FootprintSeries, cfg: MatchConfig = MatchConfig(), tol: int = 0
) -> tuple[float, Counts]:
    """Change-detection F1 over buildings that first appear after frame 0."""
    _check_frames(gt, props)
    if tol < 0:
        raise ValueError("tol must be >= 0")
    new_gt = list(_first_appearances(gt).values())
    new_props = list(_first_appearances(props).values())
    edges = []
    if new_gt and new_props:
        gpoly = np.array([f.polygon for f in new_gt], dtype=object)
        ppoly = np.array([f.polygon for f in new_props], dtype=object)
        gi, pj = candidate_pairs(shapely.bounds(gpoly), shapely.bounds(ppoly))
        if len(gi):
            dt = np.abs(np.array([new_gt[i].frame for i in gi]) - np.array([new_props[j].frame for j in pj]))
            near = dt <= tol
            gi, pj = gi[near], pj[near]
        if len(gi):
            vals = pairwise_iou(gpoly[gi], ppoly[pj])
            keep = vals >= cfg.iou_threshold
            edges = [
                (float(v), new_gt[i].building_id, new_props[j].building_id)
                for v, i, j in zip(vals[keep], gi[keep], pj[keep])
            ]
    tp = len(_greedy(edges))
    c = Counts(tp=tp, fp=len(new_props) - tp, fn=len(new_gt) - tp)
    return c.f1, c


def scot_score(track_f1: float, change_f1: float, combiner: str = "harmonic", weight: float = 0.5) -> float:
    """Combine the tracking and change terms into one SCOT value."""
    a, b = track_f1, change_f1
    if combiner == "harmonic":
        return 2 * a * b / (a + b) if a + b > 0 else 0.0
    if combiner == "arithmetic":
        return (a + b) / 2
    if combiner == "weighted":
        return weight * a + (1 - weight) * b
    raise ValueError(f"unknown combiner {combiner!r}")


@dataclass
class ScoreReport:
    aoi_id: str
    track_f1: float
    change_f1: float
    scot: float
    detection_f1: float
    track: Counts
    change: Counts
    detection: Counts
    switches: int
    combiner: str
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "aoi_id": self.aoi_id,
            "track_f1": self.track_f1,
            "change_f1": self.change_f1,
            "scot": self.scot,
            "detection_f1": self.detection_f1,
            "track": asdict(self.track),
            "change": asdict(self.change),
            "detection": asdict(self.detection),
            "switches": self.switches,
            "combiner": self.combiner,
            "notes": list(self.notes),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ScoreReport":
        return cls(
            aoi_id=d["aoi_id"],
            track_f1=d["track_f1"],
            change_f1=d["change_f1"],
            scot=d["scot"],
            detection_f1=d["detection_f1"],
            track=Counts(**d["track"]),
            change=Counts(**d["change"]),
            detection=Counts(**d["detection"]),
            switches=d.get("switches", 0),
            combiner=d.get("combiner", "harmonic"),
            notes=list(d.get("notes", [])),
        )


def score_aoi(
    gt: FootprintSeries,
    props: FootprintSeries,
    cfg: ScoreConfig = ScoreConfig(),
    udms: Sequence[UdmMask] | None = None,
) -> ScoreReport:
    if gt.frames < 2:
        raise ScoringError(f"{gt.aoi_id}: scoring needs at least 2 frames")
    if udms:
        gt = apply_udm(gt, udms, cfg.occlusion_frac)
        props = apply_udm(props, udms, cfg.occlusion_frac)
    tr = track_score(gt, props, cfg.match, cfg.switch_penalty)
    change_f1, cc = change_score(gt, props, cfg.match, cfg.tol_frames)
    notes = []
    if cc.tp == cc.fp == cc.fn == 0:
        notes.append(EMPTY_CHANGE_NOTE)
    return ScoreReport(
        aoi_id=gt.aoi_id,
        track_f1=tr.f1,
        change_f1=change_f1,
        scot=scot_score(tr.f1, change_f1, cfg.combiner, cfg.weight),
        detection_f1=detection_counts(tr.tables).f1,
        track=tr.counts,
        change=cc,
        detection=detection_counts(tr.tables),
        switches=tr.switches,
        combiner=cfg.combiner,
        notes=notes,
    )


TERMS = ("track_f1", "change_f1", "scot", "detection_f1")


@dataclass
class DatasetReport:
    config: ScoreConfig
    per_aoi: list[ScoreReport]
    mean: dict[str, float]
    std: dict[str, float]

    @property
    def scot(self) -> float:
        return self.mean["scot"]

    def to_json(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "config": self.config.to_json(),
            "conventions": [
                EMPTY_CHANGE_NOTE,
                "aggregate = unweighted mean and population std across AOIs",
            ],
            "aggregate": {"n_aoi": len(self.per_aoi), "mean": self.mean, "std": self.std},
            "aois": [r.to_json() for r in self.per_aoi],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        cols = ["aoi_id", *TERMS]
        counts = [f"{term}_{k}" for term in ("track", "change", "detection") for k in ("tp", "fp", "fn")]
        stds = [f"{t}_std" for t in TERMS]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols + counts + stds)
        for r in self.per_aoi:
            row = [r.aoi_id, *(repr(getattr(r, t)) for t in TERMS)]
            for c in (r.track, r.change, r.detection):
                row += [c.tp, c.fp, c.fn]
            w.writerow(row + [""] * len(stds))
        total = [sum(getattr(getattr(r, term), k) for r in self.per_aoi)
                 for term in ("track", "change", "detection") for k in ("tp", "fp", "fn")]
        w.writerow(["__aggregate__", *(repr(self.mean[t]) for t in TERMS), *total, *(repr(self.std[t]) for t in TERMS)])
        return buf.getvalue()

    def summary_line(self) -> str:
        m, s = self.mean, self.std
        return (
            f"aois={len(self.per_aoi)} strategy={self.config.match.strategy} "
            f"track={m['track_f1']:.4f}±{s['track_f1']:.4f} change={m['change_f1']:.4f}±{s['change_f1']:.4f} "
            f"scot={m['scot']:.4f}±{s['scot']:.4f}"
        )


def aggregate(reports: Sequence[ScoreReport]) -> tuple[dict[str, float], dict[str, float]]:
    if not reports:
        raise ScoringError("nothing to aggregate")
    mean, std = {}, {}
    for t in TERMS:
        xs = [getattr(r, t) for r in reports]
        mu = math.fsum(xs) / len(xs)
        mean[t] = mu
        std[t] = math.sqrt(math.fsum((x - mu) ** 2 for x in xs) / len(xs))
    return mean, std


def _score_job(args):
    gt, props, cfg, udms = args
    return score_aoi(gt, props, cfg, udms)


def score_dataset(
    pairs: Sequence[tuple],
    cfg: ScoreConfig = ScoreConfig(),
    jobs: int = 1,
) -> DatasetReport:
    """Score ``(gt, props)`` or ``(gt, props, udms)`` tuples and aggregate across AOIs."""
    if not pairs:
        raise ScoringError("score_dataset needs at least one AOI")
    work = []
    for item in pairs:
        gt, props = item[0], item[1]
        udms = item[2] if len(item) > 2 else None
        if gt.aoi_id != props.aoi_id:
            raise ScoringError(f"AOI id mismatch: {gt.aoi_id!r} vs {props.aoi_id!r}")
        work.append((gt, props, cfg, udms))
    work.sort(key=lambda w: w[0].aoi_id)
    ids = [w[0].aoi_id for w in work]
    if len(set(ids)) != len(ids):
        raise ScoringError("duplicate AOI ids")
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(_score_job, work))
    else:
        reports = [_score_job(w) for w in work]
    mean, std = aggregate(reports)
    return DatasetReport(cfg, reports, mean, std)
