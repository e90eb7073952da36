import json
import math
from collections import Counter

import numpy as np
import pytest
import shapely

from svcblock.geo import (PLOT_AREA_HA, Circle, IngestError, Polygon, Raster, cell_side_km,
                          extent_predictors, parse_plots, parse_polygons, parse_raster,
                          partition_cells, polygon_area, polygon_centroid, raster_mean,
                          write_plots, write_polygons, write_raster)
from svcblock.model import Dataset


def square(x0, y0, side, **kw):
    return Polygon([(x0, y0), (x0 + side, y0), (x0 + side, y0 + side), (x0, y0 + side)], **kw)


def random_polygon(rng):
    n = int(rng.integers(3, 16))
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    rad = rng.uniform(0.3, 1.0, n) * rng.uniform(0.02, 0.3)
    c = rng.uniform(-5, 5, 2)
    ring = np.column_stack([c[0] + rad * np.cos(ang), c[1] + rad * np.sin(ang)])
    geom = shapely.Polygon(ring)
    if not geom.is_valid or geom.area == 0:
        return None
    if rng.random() < 0.3:
        hole = shapely.Point(c).buffer(0.2 * rad.min(), quad_segs=4)
        if geom.contains(hole):
            geom = geom.difference(hole)
    return Polygon.from_shapely(geom, "r")


def test_area_examples():
    assert polygon_area(square(0, 0, 1)) == pytest.approx(100.0, rel=1e-14)
    assert polygon_area(Polygon([(0, 0), (1, 0), (0, 1)])) == pytest.approx(50.0, rel=1e-14)
    holed = Polygon([(0, 0), (2, 0), (2, 2), (0, 2)], [[(0.5, 0.5), (1, 0.5), (1, 1), (0.5, 1)]])
    assert holed.area == pytest.approx(400.0 - 25.0, rel=1e-14)
    # orientation and closing vertex do not matter
    cw = Polygon([(0, 0), (0, 1), (1, 1), (1, 0), (0, 0)])
    assert cw.area == pytest.approx(100.0)


def test_centroid_examples():
    assert polygon_centroid(square(0, 0, 1)) == pytest.approx((0.5, 0.5))
    L = Polygon([(0, 0), (2, 0), (2, 1), (1, 1), (1, 2), (0, 2)])
    # three unit squares with centers (0.5,0.5), (1.5,0.5), (0.5,1.5)
    assert polygon_centroid(L) == pytest.approx((5 / 6, 5 / 6), rel=1e-14)
    p = Polygon([(0, 0), (3, 0), (1, 2)])
    c, ct = polygon_centroid(p), polygon_centroid(p.translate(2.5, -1.0))
    assert ct == pytest.approx((c[0] + 2.5, c[1] - 1.0), rel=1e-13)
    holed = Polygon([(0, 0), (2, 0), (2, 2), (0, 2)],
                    [[(0.2, 0.2), (0.8, 0.2), (0.8, 0.8), (0.2, 0.8)]])
    expected = (4 * 1.0 - 0.36 * 0.5) / 3.64
    assert polygon_centroid(holed) == pytest.approx((expected, expected), rel=1e-13)


def test_invalid_polygon_rejected():
    with pytest.raises(ValueError):
        Polygon([(0, 0), (1, 1), (1, 0), (0, 1)])
    with pytest.raises(ValueError):
        Polygon([(0, 0), (1, 1)])


def test_cell_side():
    assert cell_side_km() * 1000 == pytest.approx(35.496, abs=1e-3)
    assert cell_side_km() ** 2 * 100 == pytest.approx(PLOT_AREA_HA, rel=1e-14)


def test_grid_aligned_square_gives_four_cells():
    side = 2 * cell_side_km()
    part = partition_cells(square(1.0, 2.0, side))
    assert len(part.cells) == 4
    assert polygon_area(square(1.0, 2.0, side)) == pytest.approx(0.504, rel=1e-12)
    assert np.allclose(part.areas, 0.126, rtol=1e-12)


def test_small_polygon_is_one_cell():
    p = Polygon([(0, 0), (0.01, 0), (0.005, 0.01)])
    part = partition_cells(p)
    assert len(part.cells) == 1
    assert part.cells[0].area == pytest.approx(p.area, rel=1e-12)


def test_area_conservation_random_polygons():
    rng = np.random.default_rng(0)
    done = 0
    while done < 500:
        p = random_polygon(rng)
        if p is None:
            continue
        part = partition_cells(p)
        assert abs(part.areas.sum() - p.area) <= 1e-9 * p.area
        assert np.all(part.areas <= PLOT_AREA_HA * (1 + 1e-9))
        done += 1


def test_anchor_shift_by_full_cell():
    side = cell_side_km()
    rect = Polygon([(0.0, 0.0), (3 * side, 0.0), (3 * side, 2 * side), (0.0, 2 * side)])
    off = Polygon([(0.01, 0.02), (0.2, 0.02), (0.2, 0.13), (0.01, 0.13)])
    for p in (rect, off):
        x0, y0 = p.bounds[:2]
        a = partition_cells(p, anchor=(x0, y0)).areas
        b = partition_cells(p, anchor=(x0 + side, y0 - side)).areas
        assert Counter(np.round(a, 12)) == Counter(np.round(b, 12))
    assert partition_cells(off).areas.tolist() == partition_cells(off).areas.tolist()


def test_cell_centroid_is_piece_centroid():
    p = Polygon([(0, 0), (0.05, 0), (0, 0.05)])
    for cell in partition_cells(p).cells:
        c = cell.geometry.centroid
        assert cell.centroid == (c.x, c.y)
        assert p.to_shapely().buffer(1e-12).contains(shapely.Point(cell.centroid))


def test_raster_mean_rules():
    const = Raster(np.full((20, 20), 7.5), 0.0, 0.0, cell_size_m=10)
    assert raster_mean(const, square(0.05, 0.05, 0.1)) == 7.5
    vals = np.zeros((40, 40))
    vals[:, 20:] = 1.0
    half = Raster(vals, 0.0, 0.0, cell_size_m=10)
    m = raster_mean(half, square(0.1, 0.1, 0.2))
    assert abs(m - 0.5) <= 1 / 20
    nod = Raster(np.full((10, 10), -9999.0), 0.0, 0.0, cell_size_m=10)
    with pytest.raises(ValueError):
        raster_mean(nod, square(0.01, 0.01, 0.05))
    _, count = raster_mean(const, Circle((0.1, 0.1), 0.02), return_count=True)
    assert count == sum(1 for i in range(20) for j in range(20)
                        if math.hypot((i + 0.5) * 0.01 - 0.1, (j + 0.5) * 0.01 - 0.1) < 0.02)


def test_raster_mean_tiling_invariance():
    rng = np.random.default_rng(1)
    r = Raster(rng.normal(20, 5, (57, 43)), 1.0, 2.0, cell_size_m=7)
    r.values[rng.random(r.values.shape) < 0.05] = r.nodata
    rng2 = np.random.default_rng(2)
    for _ in range(20):
        p = random_polygon(rng2)
        if p is None:
            continue
        p = p.translate(1.15 - p.bounds[0], 2.1 - p.bounds[1])
        try:
            m = raster_mean(r, p)
        except ValueError:
            continue
        for nr, nc in ((2, 3), (5, 1), (4, 4)):
            assert raster_mean(r.split(nr, nc), p) == m


def test_index_and_value_at():
    r = Raster([[1.0, 2.0], [3.0, -9999.0]], 0.0, 0.0, cell_size_m=1000)
    assert r.value_at(0.5, 1.5) == 1.0
    assert r.value_at(1.5, 1.5) == 2.0
    assert r.value_at(0.5, 0.5) == 3.0
    assert math.isnan(r.value_at(1.5, 0.5))
    with pytest.raises(ValueError):
        r.index_of(2.5, 0.5)


def test_partition_predictors_with_sliver_fallback():
    r = Raster(np.full((100, 100), 3.0), 0.0, 0.0, cell_size_m=10)
    p = Polygon([(0.1, 0.1), (0.1355, 0.1), (0.1355, 0.102), (0.1, 0.102)])
    part = partition_cells(p, rasters={"h": r})
    assert all(c.predictors == {"h": 3.0} for c in part.cells)
    assert extent_predictors({"h": r}, p.to_shapely(), (0.11, 0.101)) == {"h": 3.0}


def test_plots_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(3)
    ds = Dataset(rng.uniform(0, 3, (6, 2)), rng.normal(300, 50, 6), rng.normal(size=(6, 2)),
                 ("hmean", "hsd"), tuple(f"p{i}" for i in range(6)))
    path = tmp_path / "plots.csv"
    write_plots(path, ds)
    back = parse_plots(path)
    assert back.names == ds.names and back.ids == ds.ids
    assert np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
    assert np.array_equal(back.coords, ds.coords)
    bad = tmp_path / "bad.csv"
    for text in ("", "id,x,y,v\n1,0,0,1\n",
                 "plot_id,x_km,y_km,volume_m3_ha,h\na,0,0,1,2\na,1,1,1,2\n",
                 "plot_id,x_km,y_km,volume_m3_ha,h\na,0,0,1\n",
                 "plot_id,x_km,y_km,volume_m3_ha,h\na,0,0,,2\n",
                 "plot_id,x_km,y_km,volume_m3_ha,h\na,512000,6000000,1,2\n"):
        bad.write_text(text)
        with pytest.raises(IngestError):
            parse_plots(bad)


def test_polygons_round_trip_and_errors(tmp_path):
    polys = [square(0, 0, 0.1, id="b1", subregion="s1"),
             Polygon([(1, 1), (1.2, 1), (1.2, 1.2), (1, 1.2)],
                     [[(1.05, 1.05), (1.1, 1.05), (1.1, 1.1), (1.05, 1.1)]], "b2", "s2")]
    path = tmp_path / "b.geojson"
    write_polygons(path, polys)
    back = parse_polygons(path)
    assert [p.id for p in back] == ["b1", "b2"] and back[1].subregion == "s2"
    for a, b in zip(polys, back):
        assert np.array_equal(a.exterior, b.exterior)
        assert a.area == b.area
    doc = json.loads(path.read_text())
    cases = []
    d = json.loads(json.dumps(doc)); del d["features"][0]["properties"]["subregion"]; cases.append(d)
    d = json.loads(json.dumps(doc)); d["features"][1]["properties"]["id"] = "b1"; cases.append(d)
    d = json.loads(json.dumps(doc)); d["features"][0]["geometry"]["type"] = "Point"; cases.append(d)
    d = json.loads(json.dumps(doc))
    d["features"][0]["geometry"]["coordinates"] = [[[0, 0], [5e5, 0], [5e5, 5e5], [0, 0]]]
    cases.append(d)
    d = json.loads(json.dumps(doc))
    d["features"][0]["geometry"]["coordinates"] = [[[0, 0], [1, 1], [1, 0], [0, 1], [0, 0]]]
    cases.append(d)
    cases.append({"type": "FeatureCollection", "features": []})
    for c in cases:
        path.write_text(json.dumps(c))
        with pytest.raises(IngestError):
            parse_polygons(path)
    path.write_text("")
    with pytest.raises(IngestError):
        parse_polygons(path)


def test_raster_round_trip_and_errors(tmp_path):
    r = Raster(np.array([[1.5, 2.0, -9999.0], [4.0, 5.25, 6.0]]), 0.5, 1.25, 5.0,
               -9999.0, "hmean")
    path = tmp_path / "hmean.asc"
    write_raster(path, r)
    back = parse_raster(path)
    assert back.name == "hmean" and np.array_equal(back.values, r.values)
    assert (back.x0, back.y0, back.cell_size_m) == (r.x0, r.y0, r.cell_size_m)
    path.write_text("ncols 2\nnrows 1\nxllcenter 0.0025\nyllcenter 0.0025\ncellsize 0.005\n"
                    "1 2\n")
    assert parse_raster(path).x0 == pytest.approx(0.0)
    for text in ("", "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n",
                 "nrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1\n",
                 "ncols 1\nnrows 1\nxllcorner 400000\nyllcorner 0\ncellsize 1\n1\n",
                 "ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 0\n1\n"):
        path.write_text(text)
        with pytest.raises(IngestError):
            parse_raster(path)
