import numpy as np
import pytest

from scotkit.geometry import box, pairwise_iou
from scotkit.ingest import Footprint
from scotkit.matching import GridIndex, MatchConfig, _greedy, _optimal, candidate_pairs, f1, match_frame

from oracles import best_matching, brute_matchings


def fps(polys, frame=0, start=0):
    return [Footprint(frame, start + i, p) for i, p in enumerate(polys)]


def random_boxes(rng, n, span=10.0):
    out = []
    for _ in range(n):
        x, y = rng.uniform(0, span, 2)
        w, h = rng.uniform(1, 4, 2)
        out.append(box(x, y, x + w, y + h))
    return out


def all_edges(gt, props, thr):
    out = []
    for g in gt:
        for p in props:
            v = float(pairwise_iou([g.polygon], [p.polygon])[0])
            if v >= thr:
                out.append((v, g.building_id, p.building_id))
    return out


def test_f1_values():
    assert f1(5, 5, 5) == 0.5
    assert f1(0, 0, 0) == 0.0
    assert f1(10, 0, 0) == 1.0


def test_identical_inputs_all_matched():
    g = fps(random_boxes(np.random.default_rng(0), 6, span=40))
    t = match_frame(g, g)
    assert t.tp == len(g) and all(v == 1.0 for _, _, v in t.pairs)


def test_empty_proposals():
    g = fps([box(0, 0, 1, 1), box(3, 3, 4, 4)])
    t = match_frame(g, [])
    assert t.pairs == [] and t.unmatched_gt == [0, 1]


def test_greedy_spec_fixture_against_enumeration():
    # proposal 0 overlaps gt 0 at 0.4 and gt 1 at 0.3; proposal 1 overlaps gt 1 at 0.35
    edges = [(0.4, 0, 0), (0.3, 1, 0), (0.35, 1, 1)]
    got = _greedy(edges)
    assert sorted(got) == [(0, 0, 0.4), (1, 1, 0.35)]
    assert len(got) == best_matching(edges)[0]
    assert sorted((g, p) for g, p, _ in _optimal(edges)) == [(0, 0), (1, 1)]


def test_greedy_tie_break_prefers_lower_ids():
    edges = [(0.5, 1, 0), (0.5, 0, 0), (0.5, 0, 1)]
    assert _greedy(edges) == [(0, 0, 0.5)]


def test_greedy_can_be_suboptimal_and_optimal_fixes_it():
    edges = [(0.9, 0, 0), (0.5, 0, 1), (0.5, 1, 0)]
    assert len(_greedy(edges)) == 1
    assert len(_optimal(edges)) == 2


def test_random_instances_against_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(150):
        g = fps(random_boxes(rng, rng.integers(0, 9)))
        p = fps(random_boxes(rng, rng.integers(0, 9)), start=100)
        edges = all_edges(g, p, 0.25)
        card, total = best_matching(edges)
        opt = match_frame(g, p, MatchConfig(strategy="optimal"))
        assert opt.tp == card
        assert sum(v for _, _, v in opt.pairs) == pytest.approx(total, abs=1e-9)
        gr = match_frame(g, p)
        assert sorted((a, b) for a, b, _ in gr.pairs) == sorted((a, b) for a, b, _ in _greedy(edges))
        assert any(sorted((e[1], e[2]) for e in m) == sorted((a, b) for a, b, _ in gr.pairs)
                   for m in brute_matchings(edges))


def test_table_partitions_inputs():
    rng = np.random.default_rng(3)
    g = fps(random_boxes(rng, 8))
    p = fps(random_boxes(rng, 8), start=50)
    for strategy in ("greedy", "optimal"):
        t = match_frame(g, p, MatchConfig(strategy=strategy))
        mg = [a for a, _, _ in t.pairs]
        mp = [b for _, b, _ in t.pairs]
        assert sorted(mg + t.unmatched_gt) == [f.building_id for f in g]
        assert sorted(mp + t.unmatched_prop) == [f.building_id for f in p]
        assert all(v >= 0.25 for _, _, v in t.pairs)


def test_order_and_scale_invariance():
    rng = np.random.default_rng(11)
    g = fps(random_boxes(rng, 8))
    p = fps(random_boxes(rng, 8), start=20)
    base = match_frame(g, p)
    assert match_frame(list(reversed(g)), p[::-1]) == base
    from shapely import affinity

    scaled = lambda xs: [Footprint(f.frame, f.building_id, affinity.scale(f.polygon, 3.5, 3.5, origin=(0, 0))) for f in xs]
    t = match_frame(scaled(g), scaled(p))
    assert [(a, b) for a, b, _ in t.pairs] == [(a, b) for a, b, _ in base.pairs]


def test_threshold_validation():
    with pytest.raises(ValueError):
        MatchConfig(iou_threshold=0)
    with pytest.raises(ValueError):
        MatchConfig(strategy="hungarian")


def test_candidate_pairs_match_all_pairs():
    rng = np.random.default_rng(5)
    a = np.array([b.bounds for b in random_boxes(rng, 60, span=50)])
    b = np.array([b.bounds for b in random_boxes(rng, 60, span=50)])
    gi, pj = candidate_pairs(a, b)
    want = {(i, j) for i in range(60) for j in range(60)
            if a[i, 0] <= b[j, 2] and b[j, 0] <= a[i, 2] and a[i, 1] <= b[j, 3] and b[j, 1] <= a[i, 3]}
    assert set(zip(gi.tolist(), pj.tolist())) == want
    idx = GridIndex(a, cell_size=5.0)
    assert set(range(60)) == set().union(*(idx.query(x) for x in a))
