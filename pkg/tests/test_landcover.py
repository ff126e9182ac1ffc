import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_classes
from streetcrop.geodesy import GeoPoint
from streetcrop.landcover import (
    ClassLegend,
    FilterStats,
    GridParseError,
    LandCoverGrid,
    LegendError,
    OutOfBoundsError,
    classes_within_radius,
    filter_candidates,
    load_grid,
    parse_grid,
    write_grid,
)
from streetcrop.roadnet import CandidatePoint

CS = 0.0001
XLL, YLL = 100.0, 0.001
ND = 255

MIXED = np.array([
    [40, 40, 40, 10, 10, 10],
    [40, 40, 40, 10, 10, 10],
    [40, 40, 40, 50, 50, 50],
    [30, 30, 30, 40, 40, 40],
    [30, 30, 30, 40, 10, 40],
    [ND, ND, ND, 40, 40, 40],
])


def grid_of(cells, nodata=ND):
    cells = np.asarray(cells)
    return LandCoverGrid(cells.shape[1], cells.shape[0], XLL, YLL, CS, nodata, cells)


def center(g, r, c):
    lat, lon = g.cell_center(r, c)
    return GeoPoint(float(lat), float(lon))


def east_edge(g, r, c):
    lat, _ = g.cell_center(r, c)
    return GeoPoint(float(lat), g.xll + (c + 1) * g.cellsize)


def south_edge(g, r, c):
    _, lon = g.cell_center(r, c)
    return GeoPoint(g.yur - (r + 1) * g.cellsize, float(lon))


def se_corner(g, r, c):
    return GeoPoint(g.yur - (r + 1) * g.cellsize, g.xll + (c + 1) * g.cellsize)


def cand(*fps):
    return CandidatePoint(fps[0], 0.0, (90.0, 270.0)[: len(fps)], tuple(fps), 1)


def test_parse_uniform_cropland():
    text = "ncols 3\nnrows 3\nxllcorner 100\nyllcorner 14\ncellsize 0.0001\nNODATA_value 255\n" + "40 40 40\n" * 3
    g = parse_grid(text, ClassLegend())
    assert g.shape == (3, 3)
    assert (g.cells == 40).all() and g.cells.size == 9


def test_parse_empty_file():
    with pytest.raises(GridParseError):
        parse_grid("")


def test_parse_errors_carry_line_numbers():
    bad = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value 255\n40 40\n40 x\n"
    with pytest.raises(GridParseError) as exc:
        parse_grid(bad)
    assert exc.value.lineno == 8
    short = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value 255\n40 40\n40\n"
    with pytest.raises(GridParseError) as exc:
        parse_grid(short)
    assert exc.value.lineno == 8


def test_parse_unknown_class():
    text = "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value 255\n41\n"
    with pytest.raises(LegendError):
        parse_grid(text, ClassLegend())


def test_nodata_cells_pass_through(tmp_path):
    g = grid_of(MIXED)
    path = tmp_path / "g.asc"
    write_grid(path, g)
    back = load_grid(path)
    assert back == g
    assert classes_within_radius(back, center(back, 5, 0), 0) == frozenset()


def test_legend_validation():
    with pytest.raises(LegendError):
        ClassLegend(cropland=10, tree_cover=10)
    with pytest.raises(LegendError):
        ClassLegend(names={40: "crop"}, cropland=40, tree_cover=10)


def test_uniform_grid_query():
    g = grid_of(np.full((5, 5), 40))
    assert classes_within_radius(g, center(g, 2, 2), 10) == {40}
    assert classes_within_radius(g, se_corner(g, 1, 1), 25) == {40}


def test_radius_zero_is_containing_cell():
    g = grid_of(MIXED)
    assert classes_within_radius(g, center(g, 0, 3), 0) == {10}
    assert classes_within_radius(g, center(g, 3, 0), 0) == {30}


def test_out_of_bounds():
    g = grid_of(MIXED)
    with pytest.raises(OutOfBoundsError):
        classes_within_radius(g, GeoPoint(YLL - 0.001, XLL), 10)


def test_checkerboard_corner_matches_brute_force():
    cells = np.where((np.add.outer(np.arange(8), np.arange(8)) % 2) == 0, 40, 10)
    g = grid_of(cells)
    p = se_corner(g, 3, 3)
    got = classes_within_radius(g, p, 10)
    assert got == brute_classes(g.cells, g.yur, g.xll, g.cellsize, p.lat, p.lon, 10, ND) == {10, 40}


def test_random_queries_match_brute_force():
    rng = np.random.default_rng(4)
    cells = rng.choice([10, 20, 30, 40, 50, ND], size=(12, 12))
    g = grid_of(cells)
    for _ in range(200):
        p = GeoPoint(rng.uniform(g.yll, g.yur), rng.uniform(g.xll, g.xur))
        r = rng.uniform(0, 30)
        assert classes_within_radius(g, p, r) == brute_classes(cells, g.yur, g.xll, CS, p.lat, p.lon, r, ND)


@settings(max_examples=200)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 40), st.floats(0, 40))
def test_radius_monotone(fy, fx, r1, r2):
    cells = np.where((np.add.outer(np.arange(6), np.arange(6)) % 3) == 0, 40, 10)
    cells[2, 2] = 30
    g = grid_of(cells)
    p = GeoPoint(g.yll + fy * (g.yur - g.yll), g.xll + fx * (g.xur - g.xll))
    lo, hi = sorted((r1, r2))
    assert classes_within_radius(g, p, lo) <= classes_within_radius(g, p, hi)


def mixed_fixture():
    g = grid_of(MIXED)
    outside = GeoPoint(g.yll - 0.0005, g.xll + 0.0002)
    cands = [
        cand(center(g, 0, 0), center(g, 0, 4)),        # crop | tree
        cand(center(g, 2, 4), center(g, 3, 0)),        # built-up | grass
        cand(east_edge(g, 0, 2), center(g, 1, 1)),     # crop+tree edge | crop
        cand(se_corner(g, 2, 2), center(g, 3, 4)),     # crop/built/grass corner | crop
        cand(center(g, 4, 4), east_edge(g, 4, 3)),     # tree | crop+tree edge
        cand(center(g, 5, 0), east_edge(g, 5, 2)),     # nodata | nodata+crop edge
        cand(outside, center(g, 5, 5)),                # out of bounds | crop
        cand(center(g, 2, 0), center(g, 1, 2)),        # crop | crop
        cand(center(g, 1, 3), center(g, 2, 5)),        # tree | built-up
        cand(se_corner(g, 3, 3), south_edge(g, 3, 5)), # corner touching tree | crop/crop edge
    ]
    # hand classification: candidate index -> surviving view indices
    expected = {0: [0], 2: [1], 3: [0, 1], 5: [1], 6: [1], 7: [0, 1], 9: [1]}
    return g, cands, expected


def test_mixed_fixture_keep_set():
    g, cands, expected = mixed_fixture()
    stats = FilterStats()
    out = list(filter_candidates(cands, g, ClassLegend(), stats=stats))
    want = [
        CandidatePoint(cands[i].street, 0.0,
                       tuple(cands[i].headings[k] for k in ks),
                       tuple(cands[i].field_points[k] for k in ks), 1)
        for i, ks in expected.items()
    ]
    assert out == want
    assert stats.candidates_in == 10 and stats.candidates_kept == 7
    assert stats.views_in == 20 and stats.views_kept == 9 and stats.views_out_of_bounds == 1


def test_filter_pass_all_and_drop_all():
    crop = grid_of(np.full((6, 6), 40))
    trees = grid_of(np.full((6, 6), 10))
    cands = [cand(center(crop, r, c), center(crop, c, r)) for r in range(6) for c in range(6)]
    assert list(filter_candidates(cands, crop)) == cands
    assert list(filter_candidates(cands, trees)) == []


def test_filter_subset_order_and_idempotent():
    g, cands, _ = mixed_fixture()
    once = list(filter_candidates(cands, g, batch_size=3))
    assert once == list(filter_candidates(cands, g))
    assert list(filter_candidates(once, g)) == once
    pos = [cands.index(next(c for c in cands if c.street == o.street)) for o in once]
    assert pos == sorted(pos)
