"""Command-line entry point: ``scotkit {score,track,synth,masks,analyze}``.

Every command accepts ``--config FILE`` (JSON). Top-level sections are
``match``, ``score``, ``tracker`` (with nested ``watershed``), ``scene``,
``noise``, ``perturb``, ``synth`` and ``masks``; keys mirror the fields of the
corresponding dataclasses and unknown keys are rejected. Command-line flags
override file values. Exit status is 0 on success and 2 on invalid input.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import __version__
from .analysis import (
    AnalysisError,
    change_vs_track_table,
    feature_table,
    instance_table,
    recall_curve,
    rows_to_csv,
    scot_contours,
    svg_area_curve,
    svg_scatter,
)
from .geometry import GeometryError
from .ingest import AoiMetadata, IngestError, Layout, load_aoi, write_aoi
from .matching import MatchConfig
from .raster import CubeFormatError, WatershedParams, fbc_masks, read_cube, write_masks
from .scot import DatasetReport, ScoreConfig, ScoreReport, ScoringError, match_series, score_dataset
from .synth import (
    NoiseConfig,
    PerturbConfig,
    SceneConfig,
    SceneError,
    generate_scene,
    perturb_proposals,
    render_cube,
    transform_for,
    write_scene,
)
from .trackers import TrackerParams, baseline_track, temporal_collapse_track

log = logging.getLogger("scotkit")

EXIT_OK = 0
EXIT_INVALID = 2


class ConfigError(ValueError):
    pass


SECTIONS = {
    "match": MatchConfig,
    "score": ScoreConfig,
    "tracker": TrackerParams,
    "scene": SceneConfig,
    "noise": NoiseConfig,
    "perturb": PerturbConfig,
}
EXTRA_SECTIONS = {
    "synth": {"n_aoi": 1, "latitudes": None, "perturb": False},
    "masks": {"boundary_px": 2, "contact_px": 2},
}
_NESTED = {("tracker", "watershed"): WatershedParams}
_TUPLES = {"size_range", "construction_window", "cloud_size_range"}


def _build(section: str, cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    if section == "score":
        names.discard("match")
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {', '.join(unknown)}")
    kw = {}
    for k, v in values.items():
        nested = _NESTED.get((section, k))
        if nested is not None:
            v = _build(f"{section}.{k}", nested, v)
        elif k in _TUPLES and v is not None:
            v = tuple(v)
        kw[k] = v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


@dataclasses.dataclass
class RunConfig:
    match: MatchConfig
    score: ScoreConfig
    tracker: TrackerParams
    scene: SceneConfig
    noise: NoiseConfig
    perturb: PerturbConfig
    synth: dict
    masks: dict

    def to_json(self) -> dict:
        def conv(x):
            return dataclasses.asdict(x) if dataclasses.is_dataclass(x) else x

        return {k: conv(getattr(self, k)) for k in ("match", "score", "tracker", "scene", "noise", "perturb", "synth", "masks")}


def load_config(path: str | None, args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(raw) - set(SECTIONS) - set(EXTRA_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    sec = {k: dict(raw.get(k) or {}) for k in list(SECTIONS) + list(EXTRA_SECTIONS)}

    # flags override file values
    if getattr(args, "iou_threshold", None) is not None:
        sec["match"]["iou_threshold"] = args.iou_threshold
    if getattr(args, "strategy", None) is not None:
        sec["match"]["strategy"] = args.strategy
    if getattr(args, "combiner", None) is not None:
        sec["score"]["combiner"] = args.combiner
    if getattr(args, "tol_frames", None) is not None:
        sec["score"]["tol_frames"] = args.tol_frames
    if getattr(args, "seed", None) is not None:
        sec["scene"]["seed"] = args.seed
    if getattr(args, "n_aoi", None) is not None:
        sec["synth"]["n_aoi"] = args.n_aoi
    for key in ("boundary_px", "contact_px"):
        if getattr(args, key, None) is not None:
            sec["masks"][key] = getattr(args, key)

    built = {name: _build(name, cls, sec[name]) for name, cls in SECTIONS.items() if name != "score"}
    built["score"] = dataclasses.replace(_build("score", ScoreConfig, sec["score"]), match=built["match"])
    for name, defaults in EXTRA_SECTIONS.items():
        unknown = sorted(set(sec[name]) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown keys in [{name}]: {', '.join(unknown)}")
        built[name] = {**defaults, **sec[name]}
    if not isinstance(built["synth"]["n_aoi"], int) or built["synth"]["n_aoi"] < 0:
        raise ConfigError("[synth] n_aoi must be a non-negative integer")
    return RunConfig(**built)


def _aoi_dirs(root: Path, marker: str) -> list[Path]:
    """AOI directories under ``root`` (or ``root`` itself) containing ``marker``."""
    if (root / marker).exists():
        return [root]
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / marker).exists())


def _pmap(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


# ---------------------------------------------------------------------------
# score


def _load_pair(item):
    gt_dir, prop_dir = item
    gt, udms, meta = load_aoi(gt_dir)
    props, _, _ = load_aoi(prop_dir)
    props.aoi_id = gt.aoi_id
    return gt, props, udms


def cmd_score(args, cfg: RunConfig) -> int:
    gt_root, prop_root = Path(args.gt), Path(args.proposals)
    gt_dirs = {p.name: p for p in _aoi_dirs(gt_root, "labels")}
    prop_dirs = {p.name: p for p in _aoi_dirs(prop_root, "labels")}
    if not gt_dirs:
        print(f"error: no AOIs found under {gt_root}", file=sys.stderr)
        return EXIT_INVALID
    if len(gt_dirs) == 1 and len(prop_dirs) == 1 and (gt_root / "labels").exists():
        prop_dirs = {next(iter(gt_dirs)): next(iter(prop_dirs.values()))}
    missing = sorted(set(gt_dirs) - set(prop_dirs))
    extra = sorted(set(prop_dirs) - set(gt_dirs))
    if missing or extra:
        for a in missing:
            print(f"error: missing proposal AOI: {a}", file=sys.stderr)
        for a in extra:
            print(f"error: proposal AOI without ground truth: {a}", file=sys.stderr)
        return EXIT_INVALID
    names = sorted(gt_dirs)
    try:
        triples = _pmap(_load_pair, [(gt_dirs[a], prop_dirs[a]) for a in names], args.jobs)
        report = score_dataset(triples, cfg.score, jobs=args.jobs)
    except (IngestError, ScoringError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    doc = report.to_json()
    doc["aoi_metadata"] = {gt.aoi_id: gt.metadata.to_json() | {"n_buildings": len(gt.building_ids())}
                           for gt, _, _ in triples}
    _write_text(out / "report.json", json.dumps(doc, indent=2, sort_keys=True))
    _write_text(out / "report.csv", report.to_csv())
    _write_text(out / "instances.csv", _instances_csv(triples, cfg))
    print(report.summary_line())
    return EXIT_OK


def _instances_csv(triples, cfg: RunConfig) -> str:
    from .ingest import apply_udm

    rows = []
    for gt, props, udms in sorted(triples, key=lambda t: t[0].aoi_id):
        if udms:
            gt = apply_udm(gt, udms, cfg.score.occlusion_frac)
            props = apply_udm(props, udms, cfg.score.occlusion_frac)
        gsd = gt.metadata.gsd
        for frame, gid, area, hit in instance_table(gt, match_series(gt, props, cfg.match)):
            rows.append({"aoi_id": gt.aoi_id, "frame": frame, "gt_id": gid, "area": area,
                         "area_px2": area / gsd**2, "matched": int(hit)})
    if not rows:
        return "aoi_id,frame,gt_id,area,area_px2,matched\n"
    return rows_to_csv(rows)


# ---------------------------------------------------------------------------
# track


def _track_job(item):
    cube_dir, method, params = item
    cube = read_cube(cube_dir)
    meta_path = cube_dir / "metadata.json"
    if meta_path.exists():
        raw = json.loads(meta_path.read_text())
        meta = AoiMetadata(**{k: raw[k] for k in raw if k in {f.name for f in dataclasses.fields(AoiMetadata)}})
    else:
        t, h, w = cube.shape
        meta = AoiMetadata(gsd=cube.transform.gsd, width=w, height=h)
    fn = temporal_collapse_track if method == "collapse" else baseline_track
    return fn(cube, params, aoi_id=cube_dir.name, metadata=meta)


def cmd_track(args, cfg: RunConfig) -> int:
    dirs = _aoi_dirs(Path(args.cubes), "cube.json")
    if not dirs:
        print(f"error: no cube.json found under {args.cubes}", file=sys.stderr)
        return EXIT_INVALID
    try:
        series = _pmap(_track_job, [(d, args.method, cfg.tracker) for d in dirs], args.jobs)
    except (CubeFormatError, IngestError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    for s in series:
        write_aoi(out / s.aoi_id, s)
    manifest = {"command": "track", "version": __version__, "method": args.method,
                "tracker": dataclasses.asdict(cfg.tracker), "aois": [s.aoi_id for s in series],
                "buildings": {s.aoi_id: len(s.building_ids()) for s in series}}
    _write_text(out / "run_manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    print(f"tracked {len(series)} AOI(s) with {args.method}: "
          + ", ".join(f"{s.aoi_id}={len(s.building_ids())}" for s in series))
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth


def _synth_job(item):
    scene, noise, perturb, out, prop_out = item
    gt, meta = generate_scene(scene)
    cube, udms = render_cube(gt, noise, seed=scene.seed)
    write_scene(Path(out) / gt.aoi_id, gt, udms, cube)
    if prop_out is not None:
        props, edits = perturb_proposals(gt, perturb, seed=scene.seed)
        write_aoi(Path(prop_out) / gt.aoi_id, props)
    return gt.aoi_id


def cmd_synth(args, cfg: RunConfig) -> int:
    n = cfg.synth["n_aoi"]
    lats = cfg.synth["latitudes"]
    if lats is not None and len(lats) != n:
        print("error: [synth] latitudes must list one value per AOI", file=sys.stderr)
        return EXIT_INVALID
    prop_out = args.proposals
    if prop_out is None and cfg.synth["perturb"]:
        prop_out = str(Path(args.out) / "_proposals")
    items = []
    for i in range(n):
        kw = {"seed": cfg.scene.seed + i}
        if lats is not None:
            kw["latitude"] = float(lats[i])
        if cfg.scene.aoi_id and n > 1:
            kw["aoi_id"] = f"{cfg.scene.aoi_id}_{i:03d}"
        items.append((dataclasses.replace(cfg.scene, **kw), cfg.noise, cfg.perturb, args.out, prop_out))
    try:
        names = _pmap(_synth_job, items, args.jobs)
    except (SceneError, GeometryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    Path(args.out).mkdir(parents=True, exist_ok=True)
    manifest = {"command": "synth", "version": __version__, "seed": cfg.scene.seed,
                "rng": "numpy PCG64, SeedSequence([seed, stream])", "aois": names, "config": cfg.to_json(),
                "proposals": prop_out}
    _write_text(Path(args.out) / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(names)} AOI(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# masks


def cmd_masks(args, cfg: RunConfig) -> int:
    dirs = _aoi_dirs(Path(args.labels), "labels")
    if not dirs:
        print(f"error: no AOIs found under {args.labels}", file=sys.stderr)
        return EXIT_INVALID
    layout = Layout()
    total = 0
    for d in dirs:
        try:
            series, _, meta = load_aoi(d, layout)
        except IngestError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        stems = [f.stem for f in sorted((d / layout.labels_dir).glob("*.geojson"))]
        tr = transform_for(meta)
        for t, frame in enumerate(series.by_frame()):
            m = fbc_masks([f.polygon for f in frame], (meta.height, meta.width), tr,
                          cfg.masks["boundary_px"], cfg.masks["contact_px"])
            write_masks(Path(args.out) / d.name / f"{stems[t]}_fbc", m, tr)
            total += 1
    print(f"wrote {total} mask(s) to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze


def cmd_analyze(args, cfg: RunConfig) -> int:
    root = Path(args.reports)
    files = sorted(root.rglob("report.json"))
    if not files:
        print(f"error: no report.json under {root}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(args.out)
    scatter = []
    curves = {}
    notices = []
    for f in files:
        model = str(f.parent.relative_to(root)) if f.parent != root else "model"
        tag = model.replace("/", "_")
        doc = json.loads(f.read_text())
        reports = [ScoreReport.from_json(a) for a in doc["aois"]]
        scatter += [(model, r) for r in reports]
        meta_raw = doc.get("aoi_metadata", {})
        metadata = {}
        counts = {}
        for r in reports:
            m = meta_raw.get(r.aoi_id)
            if m is None:
                notices.append(f"{model}/{r.aoi_id}: no metadata, feature table skipped")
                continue
            metadata[r.aoi_id] = AoiMetadata(gsd=m["gsd"], latitude=m["latitude"], width=m["width"], height=m["height"])
            counts[r.aoi_id] = m.get("n_buildings")
        if len(metadata) == len(reports):
            try:
                table = feature_table(reports, metadata, counts, check_gsd=args.check_gsd)
            except AnalysisError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_INVALID
            _write_text(out / f"features_{tag}.csv", table.to_csv())
            if table.correlations:
                _write_text(out / f"correlations_{tag}.csv", table.correlation_csv())
            notices += [f"{model}: {n}" for n in table.notices]
        inst = f.parent / "instances.csv"
        if inst.exists():
            with inst.open() as fh:
                rows = list(csv.DictReader(fh))
            unit = "area_px2" if args.area_unit == "px2" else "area"
            bins = args.bins or None
            curve = recall_curve([float(r[unit]) for r in rows], [r["matched"] == "1" for r in rows],
                                 *( [bins] if bins else []))
            curves[model] = curve
            _write_text(out / f"area_recall_{tag}.csv", rows_to_csv(curve.to_rows()))
        else:
            notices.append(f"{model}: no instances.csv, area curve skipped")
    rows = change_vs_track_table(scatter)
    _write_text(out / "change_vs_track.csv", rows_to_csv(rows))
    _write_text(out / "scot_contours.csv", rows_to_csv(scot_contours(cfg.score.combiner, weight=cfg.score.weight)))
    if args.svg:
        _write_text(out / "change_vs_track.svg", svg_scatter(rows))
        if curves:
            _write_text(out / "area_recall.svg", svg_area_curve(curves))
    for n in notices:
        print(f"notice: {n}")
    print(f"analyzed {len(files)} report(s), {len(rows)} AOI row(s) -> {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scotkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--jobs", type=int, default=1, help="per-AOI worker processes")
    common.add_argument("--seed", type=int)
    common.add_argument("--iou-threshold", type=float, dest="iou_threshold")
    common.add_argument("--strategy", choices=("greedy", "optimal"))
    common.add_argument("--combiner", choices=("harmonic", "arithmetic", "weighted"))
    common.add_argument("--tol-frames", type=int, dest="tol_frames")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("score", parents=[common], help="score proposals against ground truth")
    s.add_argument("gt")
    s.add_argument("proposals")
    s.add_argument("--out", default="scot_report")
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("track", parents=[common], help="run a tracker over probability cubes")
    s.add_argument("cubes")
    s.add_argument("--method", choices=("baseline", "collapse"), default="collapse")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic AOIs")
    s.add_argument("out")
    s.add_argument("--n-aoi", type=int, dest="n_aoi")
    s.add_argument("--proposals", help="also write perturbed proposals here")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("masks", parents=[common], help="write footprint/boundary/contact masks")
    s.add_argument("labels")
    s.add_argument("out")
    s.add_argument("--boundary-px", type=int, dest="boundary_px")
    s.add_argument("--contact-px", type=int, dest="contact_px")
    s.set_defaults(func=cmd_masks)

    s = sub.add_parser("analyze", parents=[common], help="feature tables, correlations, area curves")
    s.add_argument("reports")
    s.add_argument("--out", default="analysis")
    s.add_argument("--svg", action="store_true", help="also write SVG plots")
    s.add_argument("--check-gsd", action="store_true", dest="check_gsd",
                   help="require gsd == 4.8*cos(latitude) (synthetic metadata)")
    s.add_argument("--area-unit", choices=("m2", "px2"), default="m2", dest="area_unit")
    s.add_argument("--bins", type=float, nargs="+")
    s.set_defaults(func=cmd_analyze)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = load_config(args.config, args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return args.func(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
