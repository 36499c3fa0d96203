import json

import pytest

from scotkit.geometry import box, intersection_area
from scotkit.ingest import (
    AoiMetadata,
    Footprint,
    FootprintSeries,
    IngestError,
    UdmMask,
    apply_udm,
    footprints_to_geojson,
    load_aoi,
    parse_footprints,
    write_aoi,
)
from scotkit.synth import SceneConfig, generate_scene

from conftest import series_from, square


def fc(*features):
    return json.dumps({"type": "FeatureCollection", "features": list(features)})


def feature(ring, **props):
    return {"type": "Feature", "properties": props, "geometry": {"type": "Polygon", "coordinates": [ring]}}


SQ = [[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]


def test_parse_single_feature():
    [fp] = parse_footprints(fc(feature(SQ, Id=7)))
    assert fp.building_id == 7 and fp.area == 1.0


def test_missing_id_names_feature():
    with pytest.raises(IngestError, match="missing id property at feature 0"):
        parse_footprints(fc(feature(SQ)))


def test_custom_id_key():
    [fp] = parse_footprints(fc(feature(SQ, building=3)), id_key="building")
    assert fp.building_id == 3


def test_duplicate_vertex_removed():
    dup = [[0, 0], [1, 0], [1, 0], [1, 1], [0, 1], [0, 0]]
    fps = parse_footprints(fc(feature(SQ, Id=1), feature(dup, Id=2), feature([[2, 2], [3, 2], [3, 3], [2, 2]], Id=3)))
    assert len(fps) == 3
    assert [len(f.polygon.exterior.coords) - 1 for f in fps] == [4, 4, 3]


@pytest.mark.parametrize("doc", ["{not json", json.dumps({"type": "Feature"}),
                                 fc({"type": "Feature", "properties": {"Id": 1},
                                     "geometry": {"type": "Point", "coordinates": [0, 0]}})])
def test_malformed_documents(doc):
    with pytest.raises(IngestError):
        parse_footprints(doc)


def test_load_two_months(tmp_path):
    s = series_from({1: (square(0, 0), [0, 1]), 2: (square(5, 5), [1])}, 2)
    write_aoi(tmp_path / "a", s)
    got, udms, meta = load_aoi(tmp_path / "a")
    assert got.frames == 2 and len(udms) == 2 and all(not u.obscured for u in udms)
    assert got.first_frames() == {1: 0, 2: 1}


def test_empty_dir_errors(tmp_path):
    with pytest.raises(IngestError):
        load_aoi(tmp_path)


def test_noncontiguous_months_warn(tmp_path):
    labels = tmp_path / "x" / "labels"
    labels.mkdir(parents=True)
    for tag in ("2019_01", "2019_02", "2019_05"):
        (labels / f"m_{tag}.geojson").write_text(fc(feature(SQ, Id=1)))
    s, _, _ = load_aoi(tmp_path / "x")
    assert s.frames == 3
    assert s.warnings and "non-contiguous" in s.warnings[0]


def test_synthetic_round_trip(tmp_path):
    gt, meta = generate_scene(SceneConfig(seed=4, n_buildings=30, frames=6, width=96, height=96))
    write_aoi(tmp_path / gt.aoi_id, gt)
    back, _, meta2 = load_aoi(tmp_path / gt.aoi_id)
    assert meta2.gsd == meta.gsd and meta2.latitude == meta.latitude
    key = lambda f: (f.frame, f.building_id)
    a, b = sorted(gt.footprints, key=key), sorted(back.footprints, key=key)
    assert [key(f) for f in a] == [key(f) for f in b]
    for fa, fb in zip(a, b):
        assert fa.polygon.equals_exact(fb.polygon, 1e-9)


def test_series_invariants():
    with pytest.raises(IngestError):
        FootprintSeries("a", 2, [Footprint(2, 0, square(0, 0))])
    with pytest.raises(IngestError):
        FootprintSeries("a", 2, [Footprint(0, 1, square(0, 0)), Footprint(0, 1, square(3, 3))])
    with pytest.raises(IngestError):
        AoiMetadata(gsd=0)


def test_udm_no_clouds_unchanged():
    s = series_from({1: (square(0, 0), [0, 1])}, 2)
    assert apply_udm(s, [UdmMask(0), UdmMask(1)]).footprints == s.footprints


def test_udm_fully_covered_removed():
    s = series_from({1: (square(0, 0), [0, 1])}, 2)
    out = apply_udm(s, [UdmMask(0, [box(-1, -1, 2, 2)])], 0.5)
    assert [(f.frame, f.building_id) for f in out.footprints] == [(1, 1)]


def test_udm_forty_percent_kept():
    cloud = box(0, 0, 0.4, 1)
    b = square(0, 0)
    assert intersection_area(b, cloud) == pytest.approx(0.4)
    s = series_from({1: (b, [0])}, 2)
    assert len(apply_udm(s, [UdmMask(0, [cloud])], 0.5).footprints) == 1


def test_udm_idempotent_and_preserving():
    s = series_from({1: (square(0, 0), [0, 1]), 2: (square(3, 0), [0, 1]), 3: (square(6, 0), [1])}, 2)
    udms = [UdmMask(0, [box(2.5, -1, 4.5, 2)]), UdmMask(1, [box(5.8, 0, 6.8, 0.9)])]
    once = apply_udm(s, udms)
    assert apply_udm(once, udms).footprints == once.footprints
    assert set(once.footprints) <= set(s.footprints)


def test_geojson_is_deterministic():
    fps = [Footprint(0, 2, square(1, 1)), Footprint(0, 1, square(0, 0))]
    assert footprints_to_geojson(fps) == footprints_to_geojson(list(reversed(fps)))
