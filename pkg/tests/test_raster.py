import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage as ndi

from scotkit.geometry import box, make_polygon, polygon_area
from scotkit.raster import (
    CubeFormatError,
    ProbabilityCube,
    Transform,
    WatershedParams,
    collapse_time,
    connected_components,
    fbc_masks,
    mask_to_polygons,
    polygonize,
    rasterize,
    rasterize_labels,
    read_cube,
    read_masks,
    upsample,
    watershed_instances,
    write_cube,
    write_masks,
)

from oracles import bfs_labels, priority_flood

# --- upsample ---------------------------------------------------------------


def test_upsample_identity():
    img = np.random.default_rng(0).uniform(size=(5, 7)).astype(np.float32)
    np.testing.assert_array_equal(upsample(img, 1), img)


def test_upsample_nearest_single_pixel():
    np.testing.assert_array_equal(upsample(np.array([[0.7]]), 3, "nearest"), np.full((3, 3), 0.7))


def test_upsample_bilinear_closed_form():
    img = np.array([[0.0], [1.0]], dtype=np.float32)
    out = upsample(img, 2, "bilinear")
    assert out.shape == (4, 2)
    # output centre i samples input coordinate u = (i + 0.5)/2 - 0.5, value = clamp(u, 0, 1)
    want = [min(max((i + 0.5) / 2 - 0.5, 0.0), 1.0) for i in range(4)]
    np.testing.assert_allclose(out[:, 0], want, atol=1e-7)
    assert out[1, 0] == pytest.approx(0.25) and out[2, 0] == pytest.approx(0.75)


def test_upsample_range_and_errors():
    img = np.random.default_rng(1).uniform(size=(6, 6))
    out = upsample(img, 3)
    assert out.min() >= 0 and out.max() <= 1 and out.shape == (18, 18)
    with pytest.raises(ValueError):
        upsample(img, 0)


# --- collapse ---------------------------------------------------------------


def test_collapse_constant():
    cube = ProbabilityCube(np.full((5, 4, 4), 0.3))
    np.testing.assert_array_equal(collapse_time(cube), cube.values[0])


def test_collapse_ignores_masked_garbage():
    vals = np.full((4, 3, 3), 0.2, dtype=np.float32)
    vals[2] = 1.0
    valid = np.ones(vals.shape, bool)
    valid[2] = False
    np.testing.assert_allclose(collapse_time(ProbabilityCube(vals, valid)), 0.2, atol=1e-7)
    valid[:] = False
    assert not collapse_time(ProbabilityCube(vals, valid)).any()


def test_collapse_analytic_mean():
    T, k, p = 12, 5, 0.8
    vals = np.zeros((T, 4, 4), dtype=np.float32)
    vals[k:, 1:3, 1:3] = p
    out = collapse_time(ProbabilityCube(vals))
    assert out[1, 1] == pytest.approx(p * (T - k) / T, rel=1e-6)
    assert out[0, 0] == 0


def test_cube_validation():
    with pytest.raises(ValueError):
        ProbabilityCube(np.full((1, 2, 2), 1.5))
    with pytest.raises(ValueError):
        ProbabilityCube(np.zeros((2, 2)))


# --- connected components ------------------------------------------------------


def test_components_basic():
    assert connected_components(np.zeros((4, 4))).max() == 0
    img = np.zeros((5, 5), bool)
    img[0, 0] = img[3:5, 3:5] = True
    assert connected_components(img).max() == 2
    diag = np.eye(3, dtype=bool)
    assert connected_components(diag, 8).max() == 1
    assert connected_components(diag, 4).max() == 3


def test_components_match_bfs_label_order():
    rng = np.random.default_rng(2)
    for _ in range(30):
        img = rng.uniform(size=(20, 23)) < 0.45
        for conn in (4, 8):
            np.testing.assert_array_equal(connected_components(img, conn), bfs_labels(img, conn))


# --- watershed ---------------------------------------------------------------


def blob(shape, cy, cx, peak, sigma):
    y, x = np.mgrid[: shape[0], : shape[1]]
    return peak * np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (2 * sigma**2))


def test_single_blob_one_instance():
    assert watershed_instances(blob((40, 40), 20, 20, 0.9, 5)).max() == 1


def test_separated_blobs_two_instances():
    m = blob((40, 60), 20, 15, 0.9, 4) + blob((40, 60), 20, 45, 0.9, 4)
    m[:, 29:31] = 0
    assert watershed_instances(np.clip(m, 0, 1)).max() == 2


def two_blobs_with_saddle(saddle, peaks=(0.9, 0.9), n=64):
    """Two equal-width Gaussians whose sum dips to ``saddle`` midway between them."""
    sigma = 5.0
    # with peaks p at distance d, the midpoint value is 2 p exp(-(d/2)^2 / (2 sigma^2))
    d = 2 * sigma * math.sqrt(2 * math.log(2 * peaks[0] / saddle))
    c0, c1 = n / 2 - d / 2, n / 2 + d / 2
    m = blob((n, n), n / 2, c0, peaks[0], sigma) + blob((n, n), n / 2, c1, peaks[1], sigma)
    return np.clip(m, 0, 1)


def flood_oracle(prob, params):
    """Flood the smoothed map from its local maxima, then apply the adaptive
    threshold and keep the piece holding each region's peak."""
    smooth = ndi.gaussian_filter(prob, params.smooth_sigma, mode="nearest")
    domain = prob >= params.t_min
    comp = connected_components(domain)
    seeds = []
    for lab in range(1, comp.max() + 1):
        masked = np.where(comp == lab, smooth, -np.inf)
        # each side of the saddle has one maximum; find both halves' maxima
        cols = np.nonzero((comp == lab).any(axis=0))[0]
        mid = (cols.min() + cols.max()) // 2
        for half in (slice(None, mid), slice(mid, None)):
            sub = np.full_like(masked, -np.inf)
            sub[:, half] = masked[:, half]
            r, c = np.unravel_index(np.argmax(sub), sub.shape)
            if sub[r, c] > params.seed_threshold and not any(
                abs(r - a) <= 2 and abs(c - b) <= 2 for a, b in seeds
            ):
                # keep only true local maxima of the smoothed map
                win = smooth[max(r - 1, 0) : r + 2, max(c - 1, 0) : c + 2]
                if smooth[r, c] >= win.max():
                    seeds.append((r, c))
    owner = priority_flood(smooth, domain, seeds)
    out = np.zeros(prob.shape, int)
    for k in range(1, len(seeds) + 1):
        region = owner == k
        peak = prob[region].max()
        keep = region & (prob >= max(params.t_min, params.alpha * peak))
        lab, _ = ndi.label(keep)
        r, c = np.unravel_index(np.argmax(np.where(region, prob, -1)), prob.shape)
        out[lab == lab[r, c]] = k
    return out


def same_partition(a, b):
    if not np.array_equal(a > 0, b > 0):
        return False
    pairs = set(zip(a[a > 0].tolist(), b[b > 0].tolist()))
    return len(pairs) == len({p[0] for p in pairs}) == len({p[1] for p in pairs})


@pytest.mark.parametrize("saddle,peaks", [(0.3, (0.9, 0.9)), (0.6, (0.9, 0.8)), (0.7, (0.95, 0.9))])
def test_saddle_split_matches_flood_oracle(saddle, peaks):
    params = WatershedParams(alpha=0.5, t_min=0.4)
    prob = two_blobs_with_saddle(saddle, peaks)
    got = watershed_instances(prob, params)
    assert got.max() == 2
    assert same_partition(got, flood_oracle(prob, params))


def test_watershed_regions_disjoint_connected_contiguous():
    rng = np.random.default_rng(4)
    m = np.zeros((80, 80))
    for _ in range(12):
        m += blob(m.shape, *rng.uniform(5, 75, 2), rng.uniform(0.5, 1), rng.uniform(2, 5))
    labels = watershed_instances(np.clip(m, 0, 1))
    n = labels.max()
    assert set(np.unique(labels)) == set(range(n + 1))
    for lab in range(1, n + 1):
        assert ndi.label(labels == lab)[1] == 1


def test_watershed_empty_and_deterministic():
    assert watershed_instances(np.zeros((10, 10))).max() == 0
    m = np.clip(blob((50, 50), 25, 20, 0.9, 4) + blob((50, 50), 25, 31, 0.8, 4), 0, 1)
    np.testing.assert_array_equal(watershed_instances(m), watershed_instances(m.copy()))


def test_watershed_param_validation():
    with pytest.raises(ValueError):
        WatershedParams(alpha=0)
    with pytest.raises(ValueError):
        WatershedParams(min_region_px=0)


# --- polygonize ---------------------------------------------------------------


def test_single_pixel_polygon():
    labels = np.zeros((4, 4), int)
    labels[1, 2] = 1
    [(lab, poly)] = polygonize(labels, Transform(gsd=0.5, origin_x=10, origin_y=20))
    assert lab == 1 and poly.area == 0.25
    assert poly.bounds == (11.0, 19.0, 11.5, 19.5)


def test_block_and_l_shape():
    labels = np.zeros((5, 5), int)
    labels[0:2, 0:2] = 1
    labels[3, 3] = labels[4, 3] = labels[4, 4] = 2
    polys = dict(polygonize(labels, Transform(gsd=2.0)))
    assert polys[1].area == 16.0 and len(polys[1].exterior.coords) - 1 == 4
    assert polys[2].area == 12.0 and len(polys[2].exterior.coords) - 1 == 6


def test_hole_preserved():
    mask = np.ones((5, 5), bool)
    mask[2, 2] = False
    [poly] = mask_to_polygons(mask)
    assert len(poly.interiors) == 1 and poly.area == 24


def test_diagonal_pinch_splits():
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = mask[1, 1] = True
    assert sorted(p.area for p in mask_to_polygons(mask)) == [1.0, 1.0]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.7]))
def test_polygonize_rasterize_round_trip(seed, density):
    rng = np.random.default_rng(seed)
    mask = rng.uniform(size=(9, 11)) < density
    labels = connected_components(mask, 4)
    tr = Transform(gsd=1.5, origin_x=3.0, origin_y=7.0)
    out = np.zeros_like(labels)
    for lab, poly in polygonize(labels, tr):
        assert polygon_area(poly) == pytest.approx(np.count_nonzero(labels == lab) * tr.gsd**2, abs=1e-9)
        hit = rasterize([poly], labels.shape, tr)
        assert not (out[hit]).any()
        out[hit] = lab
    np.testing.assert_array_equal(out, labels)


def test_rasterize_rectilinear_identity():
    tr = Transform(gsd=1.0)
    poly = make_polygon([(1, -1), (4, -1), (4, -3), (2, -3), (2, -5), (1, -5)])
    hit = rasterize([poly], (6, 6), tr)
    assert hit.sum() == polygon_area(poly)
    [(_, back)] = polygonize(hit.astype(int), tr)
    assert back.equals(poly)
    lab = rasterize_labels([poly, box(4, -6, 6, -4)], (6, 6), tr)
    assert set(np.unique(lab)) == {0, 1, 2}


# --- cube I/O ------------------------------------------------------------------


def test_cube_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    vals = rng.uniform(size=(3, 4, 5)).astype(np.float32)
    valid = rng.uniform(size=vals.shape) < 0.8
    cube = ProbabilityCube(vals, valid, Transform(2.5, 100.0, 50.0))
    write_cube(tmp_path, cube, udm_ref="udm")
    back = read_cube(tmp_path)
    np.testing.assert_array_equal(back.values, vals)
    np.testing.assert_array_equal(back.valid, valid)
    assert back.transform == cube.transform
    raw = (tmp_path / "cube.bin").read_bytes()
    assert raw == vals.astype("<f4").tobytes()


def test_cube_bad_header(tmp_path):
    (tmp_path / "cube.json").write_text("{}")
    with pytest.raises(CubeFormatError):
        read_cube(tmp_path)
    write_cube(tmp_path, ProbabilityCube(np.zeros((1, 2, 2))))
    (tmp_path / "cube.bin").write_bytes(b"\0" * 8)
    with pytest.raises(CubeFormatError):
        read_cube(tmp_path)


# --- fbc masks ------------------------------------------------------------------


def pixel_centres(mask):
    return np.argwhere(mask).astype(float)


def brute_contact(pixel_sets, shape, contact_px):
    out = np.zeros(shape, bool)
    for r, c in itertools.product(range(shape[0]), range(shape[1])):
        near = 0
        for pts in pixel_sets:
            if len(pts) and np.min(np.hypot(pts[:, 0] - r, pts[:, 1] - c)) <= contact_px:
                near += 1
        out[r, c] = near >= 2
    return out


def test_fbc_empty():
    assert not fbc_masks([], (8, 8), Transform()).any()


def test_fbc_single_rectangle():
    tr = Transform()
    m = fbc_masks([box(2, -8, 8, -2)], (10, 10), tr, boundary_px=1, contact_px=2)
    assert m.shape == (3, 10, 10) and set(np.unique(m)) <= {0, 1}
    assert m[0].sum() == 36
    assert m[1].sum() == 36 - 16  # one-pixel ring
    assert not m[2].any()


def test_fbc_adjacent_pair_contact_band():
    tr = Transform()
    shape = (14, 16)
    polys = [box(2, -11, 7, -3), box(8, -11, 13, -3)]  # one empty column between them
    m = fbc_masks(polys, shape, tr, boundary_px=2, contact_px=2)
    sets = [pixel_centres(rasterize([p], shape, tr)) for p in polys]
    want = brute_contact(sets, shape, 2)
    np.testing.assert_array_equal(m[2].astype(bool), want)
    # the gap column plus one diagonal-reach row above and below
    assert m[2][:, 7].sum() == 8 + 2
    # boundary band: footprint pixels within 2 px of a non-footprint pixel centre
    own = m[0].astype(bool)
    bg = pixel_centres(~own)
    for r, c in np.argwhere(own):
        d = np.min(np.hypot(bg[:, 0] - r, bg[:, 1] - c))
        assert bool(m[1, r, c]) == (d <= 2)


def test_fbc_random_contact_brute_force():
    rng = np.random.default_rng(9)
    tr = Transform()
    shape = (24, 24)
    for _ in range(5):
        polys = []
        for _ in range(4):
            x, y = rng.integers(1, 18, 2)
            w, h = rng.integers(2, 5, 2)
            polys.append(box(x, -(y + h), x + w, -y))
        m = fbc_masks(polys, shape, tr, boundary_px=1, contact_px=2)
        sets = [pixel_centres(rasterize([p], shape, tr)) for p in polys]
        np.testing.assert_array_equal(m[2].astype(bool), brute_contact(sets, shape, 2))


def test_fbc_write_read(tmp_path):
    m = fbc_masks([box(1, -5, 5, -1)], (6, 6), Transform())
    write_masks(tmp_path / "f", m)
    np.testing.assert_array_equal(read_masks(tmp_path / "f"), m)
