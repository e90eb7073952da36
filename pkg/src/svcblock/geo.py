"""Plots, blowdown polygons and predictor rasters in a km-projected plane.

Areas are reported in hectares (1 km^2 = 100 ha).  Raster cell sizes are
held in metres on the object; in Esri ASCII files every header quantity,
``cellsize`` included, is in the km units of the plane.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import shapely
from shapely.geometry import Polygon as ShapelyPolygon
from shapely.validation import explain_validity

from .model import Dataset

HA_PER_KM2 = 100.0
PLOT_AREA_HA = 0.126
#: any |coordinate| beyond this cannot be km in a projected plane
MAX_ABS_KM = 20_000.0
PLOTS_HEADER = ["plot_id", "x_km", "y_km", "volume_m3_ha"]


class IngestError(ValueError):
    """Input file does not follow its schema."""


def _ring_area(ring):
    # shift to a local origin; raw km coordinates cancel badly for small rings
    r = ring - ring[0]
    x, y = r[:, 0], r[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _ring_centroid(ring, origin):
    """Signed area and centroid of a ring, the centroid relative to ``origin``."""
    r = ring - origin
    x, y = r[:, 0], r[:, 1]
    x1, y1 = np.roll(x, -1), np.roll(y, -1)
    cross = x * y1 - x1 * y
    a = 0.5 * cross.sum()
    return a, np.array([np.sum((x + x1) * cross), np.sum((y + y1) * cross)]) / (6.0 * a)


def _open_ring(coords, what):
    ring = np.asarray(coords, dtype=float)
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise ValueError(f"{what}: ring must be a list of (x, y) pairs")
    if len(ring) > 1 and np.array_equal(ring[0], ring[-1]):
        ring = ring[:-1]
    if len(np.unique(ring, axis=0)) < 3:
        raise ValueError(f"{what}: ring needs at least three distinct vertices")
    return ring


@dataclass
class Polygon:
    """Simple polygon with optional holes.

    Rings are stored open (no repeated closing vertex) with the exterior
    counter-clockwise and holes clockwise.
    """

    exterior: np.ndarray
    holes: list = field(default_factory=list)
    id: str = ""
    subregion: str = ""

    def __post_init__(self):
        what = f"polygon {self.id!r}"
        ext = _open_ring(self.exterior, what)
        self.exterior = ext if _ring_area(ext) > 0 else ext[::-1]
        holes = []
        for h in self.holes:
            h = _open_ring(h, what)
            holes.append(h if _ring_area(h) < 0 else h[::-1])
        self.holes = holes
        self.id, self.subregion = str(self.id), str(self.subregion)
        geom = self.to_shapely()
        if not geom.is_valid:
            raise ValueError(f"{what} is invalid: {explain_validity(geom)}")

    def to_shapely(self) -> ShapelyPolygon:
        return ShapelyPolygon(self.exterior, self.holes)

    @property
    def bounds(self):
        return self.to_shapely().bounds

    @property
    def area(self) -> float:
        return polygon_area(self)

    def translate(self, dx, dy) -> "Polygon":
        t = np.array([dx, dy], dtype=float)
        return Polygon(self.exterior + t, [h + t for h in self.holes], self.id, self.subregion)

    @classmethod
    def from_shapely(cls, geom, id="", subregion=""):
        return cls(np.asarray(geom.exterior.coords), [np.asarray(r.coords) for r in geom.interiors],
                   id, subregion)


@dataclass(frozen=True)
class Circle:
    """Circular plot footprint; radius in km."""

    center: tuple
    radius: float

    def to_shapely(self):
        return shapely.Point(self.center).buffer(self.radius, quad_segs=64)


def polygon_area(p: Polygon) -> float:
    """Shoelace area in hectares, holes subtracted."""
    a = _ring_area(p.exterior) + sum(_ring_area(h) for h in p.holes)
    return a * HA_PER_KM2


def polygon_centroid(p: Polygon):
    """Area-weighted centroid; may lie outside a non-convex polygon."""
    origin = p.exterior[0]
    total, moment = 0.0, np.zeros(2)
    for ring in [p.exterior] + p.holes:
        a, c = _ring_centroid(ring, origin)
        total += a
        moment += a * c
    if not abs(total) > 0:
        raise ValueError(f"polygon {p.id!r} has zero area")
    c = moment / total + origin
    return float(c[0]), float(c[1])


@dataclass
class Raster:
    """Regular grid of one predictor variable.

    ``values[0]`` is the northernmost row, as in Esri ASCII grids.  ``x0``
    and ``y0`` are the lower-left corner in km.
    """

    values: np.ndarray
    x0: float
    y0: float
    cell_size_m: float = 1.0
    nodata: float = -9999.0
    name: str = ""

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if not self.cell_size_m > 0:
            raise ValueError("cell size must be positive")

    @property
    def cell_km(self) -> float:
        return self.cell_size_m / 1000.0

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def bounds(self):
        return (self.x0, self.y0, self.x0 + self.n_cols * self.cell_km,
                self.y0 + self.n_rows * self.cell_km)

    def cell_centers(self, rows, cols):
        x = self.x0 + (np.asarray(cols) + 0.5) * self.cell_km
        y = self.y0 + (self.n_rows - np.asarray(rows) - 0.5) * self.cell_km
        return x, y

    def index_of(self, x, y):
        col = int(math.floor((x - self.x0) / self.cell_km))
        row = self.n_rows - 1 - int(math.floor((y - self.y0) / self.cell_km))
        if not (0 <= row < self.n_rows and 0 <= col < self.n_cols):
            raise ValueError(f"({x}, {y}) lies outside raster {self.name!r}")
        return row, col

    def value_at(self, x, y) -> float:
        """Cell value at a coordinate; nan for nodata."""
        v = self.values[self.index_of(x, y)]
        return float("nan") if v == self.nodata else float(v)

    def split(self, n_row_tiles, n_col_tiles) -> list:
        """Partition into a grid of tiles covering the same cells."""
        tiles = []
        rows = np.array_split(np.arange(self.n_rows), n_row_tiles)
        cols = np.array_split(np.arange(self.n_cols), n_col_tiles)
        for r in rows:
            for c in cols:
                if not (r.size and c.size):
                    continue
                tiles.append(Raster(self.values[r[0]:r[-1] + 1, c[0]:c[-1] + 1],
                                    self.x0 + c[0] * self.cell_km,
                                    self.y0 + (self.n_rows - r[-1] - 1) * self.cell_km,
                                    self.cell_size_m, self.nodata, self.name))
        return tiles


def _extent_geometry(extent):
    if isinstance(extent, (Polygon, Circle)):
        return extent.to_shapely()
    if isinstance(extent, shapely.Geometry):
        return extent
    raise TypeError(f"unsupported extent type {type(extent).__name__}")


def _values_in(r: Raster, geom):
    minx, miny, maxx, maxy = geom.bounds
    c0 = max(int(math.floor((minx - r.x0) / r.cell_km)), 0)
    c1 = min(int(math.ceil((maxx - r.x0) / r.cell_km)), r.n_cols)
    top = r.y0 + r.n_rows * r.cell_km
    r0 = max(int(math.floor((top - maxy) / r.cell_km)), 0)
    r1 = min(int(math.ceil((top - miny) / r.cell_km)), r.n_rows)
    if c1 <= c0 or r1 <= r0:
        return np.empty(0)
    rows, cols = np.mgrid[r0:r1, c0:c1]
    x, y = r.cell_centers(rows.ravel(), cols.ravel())
    inside = shapely.intersects_xy(geom, x, y)
    vals = r.values[rows.ravel()[inside], cols.ravel()[inside]]
    return vals[vals != r.nodata]


def raster_mean(raster, extent, return_count=False):
    """Mean of the non-nodata cells whose centers fall inside ``extent``.

    ``raster`` may be a single :class:`Raster` or a sequence of tiles.  The
    sum is computed with exact rounding, so tiling never changes the result.
    """
    tiles = [raster] if isinstance(raster, Raster) else list(raster)
    geom = _extent_geometry(extent)
    vals = np.concatenate([_values_in(t, geom) for t in tiles]) if tiles else np.empty(0)
    if vals.size == 0:
        name = tiles[0].name if tiles else ""
        raise ValueError(f"no valid raster {name!r} cells inside the extent")
    mean = math.fsum(vals.tolist()) / vals.size
    return (mean, int(vals.size)) if return_count else mean


@dataclass
class Cell:
    geometry: object
    area: float
    centroid: tuple
    predictors: dict = field(default_factory=dict)


@dataclass
class CellPartition:
    polygon_id: str
    cells: list
    cell_area: float

    @property
    def areas(self) -> np.ndarray:
        return np.array([c.area for c in self.cells])


def cell_side_km(cell_area=PLOT_AREA_HA) -> float:
    return math.sqrt(cell_area / HA_PER_KM2)


def partition_cells(p: Polygon, cell_area=PLOT_AREA_HA, anchor=None, rasters=None
                    ) -> CellPartition:
    """Clip a square grid of ``cell_area`` ha cells to the polygon.

    The grid is anchored at ``anchor`` (default: the polygon's bounding-box
    lower-left corner).  Each clipped piece is indexed by its own centroid.
    When ``rasters`` (name -> Raster) are given, the predictors of each piece
    are raster means over the piece; a sliver containing no cell center
    takes the value of the raster cell under its centroid.
    """
    geom = p.to_shapely()
    side = cell_side_km(cell_area)
    minx, miny, maxx, maxy = geom.bounds
    ax, ay = (minx, miny) if anchor is None else anchor
    i0, i1 = math.floor((minx - ax) / side), math.ceil((maxx - ax) / side)
    j0, j1 = math.floor((miny - ay) / side), math.ceil((maxy - ay) / side)
    ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    boxes = shapely.box(ax + ii * side, ay + jj * side, ax + (ii + 1) * side, ay + (jj + 1) * side)
    pieces = shapely.intersection(boxes, geom)
    areas = shapely.area(pieces) * HA_PER_KM2
    cells = []
    for piece, a in zip(pieces, areas):
        if not a > 0:
            continue
        c = piece.centroid
        cells.append(Cell(piece, float(a), (c.x, c.y)))
    if not cells:
        raise ValueError(f"partition of polygon {p.id!r} produced no cells")
    if rasters:
        for cell in cells:
            cell.predictors = extent_predictors(rasters, cell.geometry, cell.centroid)
    return CellPartition(p.id, cells, cell_area)


def extent_predictors(rasters: Mapping[str, object], geom, fallback_point=None) -> dict:
    out = {}
    for name, r in rasters.items():
        try:
            out[name] = raster_mean(r, geom)
        except ValueError:
            if fallback_point is None:
                raise
            tiles = [r] if isinstance(r, Raster) else list(r)
            out[name] = _point_value(tiles, fallback_point, name)
    return out


def _point_value(tiles, pt, name):
    for t in tiles:
        try:
            v = t.value_at(*pt)
        except ValueError:
            continue
        if not np.isnan(v):
            return v
    raise ValueError(f"no valid raster {name!r} value at {pt}")


# ---------------------------------------------------------------- file I/O

def _check_coords(x, y, where):
    if not (math.isfinite(x) and math.isfinite(y)):
        raise IngestError(f"{where}: non-finite coordinate")
    if abs(x) > MAX_ABS_KM or abs(y) > MAX_ABS_KM:
        raise IngestError(f"{where}: coordinate ({x}, {y}) is implausible for km units; "
                          "check the projection / units (metres?)")


def parse_plots(path) -> Dataset:
    """Read ``plot_id,x_km,y_km,volume_m3_ha,<predictors...>``."""
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(c.strip() for c in r)]
    if not rows:
        raise IngestError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if header[:4] != PLOTS_HEADER:
        raise IngestError(f"{path}:1: header must start with {','.join(PLOTS_HEADER)}")
    names = header[4:]
    if len(set(names)) != len(names) or any(not n for n in names):
        raise IngestError(f"{path}:1: predictor column names must be unique and non-empty")
    if len(rows) < 2:
        raise IngestError(f"{path}: no data rows")
    ids, coords, y, X = [], [], [], []
    for lineno, r in enumerate(rows[1:], start=2):
        where = f"{path}:{lineno}"
        if len(r) != len(header):
            raise IngestError(f"{where}: expected {len(header)} fields, got {len(r)}")
        try:
            vals = [float(v) for v in r[1:]]
        except ValueError as exc:
            raise IngestError(f"{where}: {exc}") from None
        if not all(math.isfinite(v) for v in vals):
            raise IngestError(f"{where}: missing or non-finite value")
        _check_coords(vals[0], vals[1], where)
        pid = r[0].strip()
        if not pid:
            raise IngestError(f"{where}: empty plot_id")
        if pid in ids:
            raise IngestError(f"{where}: duplicate plot_id {pid!r}")
        ids.append(pid)
        coords.append(vals[:2])
        y.append(vals[2])
        X.append(vals[3:])
    try:
        return Dataset(np.array(coords), np.array(y), np.array(X).reshape(len(y), len(names)),
                       tuple(names), tuple(ids))
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from None


def write_plots(path, ds: Dataset):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PLOTS_HEADER + list(ds.names))
        for i in range(ds.n):
            w.writerow([ds.ids[i], repr(float(ds.coords[i, 0])), repr(float(ds.coords[i, 1])),
                        repr(float(ds.y[i]))] + [repr(float(v)) for v in ds.X[i]])


def parse_polygons(path) -> list:
    """Read a GeoJSON FeatureCollection of Polygon features with ``id`` and ``subregion``."""
    path = Path(path)
    text = path.read_text()
    if not text.strip():
        raise IngestError(f"{path}: empty file")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise IngestError(f"{path}: invalid JSON ({exc})") from None
    if doc.get("type") != "FeatureCollection" or not isinstance(doc.get("features"), list):
        raise IngestError(f"{path}: expected a GeoJSON FeatureCollection")
    if not doc["features"]:
        raise IngestError(f"{path}: no features")
    out, seen = [], set()
    for k, feat in enumerate(doc["features"]):
        where = f"{path}: feature {k}"
        props = feat.get("properties") or {}
        for key in ("id", "subregion"):
            if key not in props or props[key] in (None, ""):
                raise IngestError(f"{where}: missing required property {key!r}")
        geom = feat.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise IngestError(f"{where}: geometry must be a Polygon, got {geom.get('type')!r}")
        rings = geom.get("coordinates") or []
        if not rings:
            raise IngestError(f"{where}: no coordinates")
        for ring in rings:
            for pt in ring:
                _check_coords(float(pt[0]), float(pt[1]), where)
        bid = str(props["id"])
        if bid in seen:
            raise IngestError(f"{where}: duplicate id {bid!r}")
        seen.add(bid)
        try:
            out.append(Polygon(np.array(rings[0], dtype=float)[:, :2],
                               [np.array(h, dtype=float)[:, :2] for h in rings[1:]],
                               bid, str(props["subregion"])))
        except ValueError as exc:
            raise IngestError(f"{where}: {exc}") from None
    return out


def polygons_to_geojson(polygons: Sequence[Polygon]) -> dict:
    feats = []
    for p in polygons:
        rings = [p.exterior] + p.holes
        coords = [[[float(x), float(y)] for x, y in np.vstack([r, r[:1]])] for r in rings]
        feats.append({"type": "Feature",
                      "properties": {"id": p.id, "subregion": p.subregion},
                      "geometry": {"type": "Polygon", "coordinates": coords}})
    return {"type": "FeatureCollection", "features": feats}


def write_polygons(path, polygons: Sequence[Polygon]):
    Path(path).write_text(json.dumps(polygons_to_geojson(polygons), indent=1))


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


def parse_raster(path, name=None) -> Raster:
    """Read an Esri ASCII grid whose header is in km plane units."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not any(l.strip() for l in lines):
        raise IngestError(f"{path}: empty file")
    header, k = {}, 0
    while k < len(lines):
        parts = lines[k].split()
        if not parts:
            k += 1
            continue
        key = parts[0].lower()
        if key in ("xllcenter", "yllcenter") or key in _HEADER_KEYS:
            if len(parts) != 2:
                raise IngestError(f"{path}:{k + 1}: malformed header line")
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise IngestError(f"{path}:{k + 1}: non-numeric header value") from None
            k += 1
        else:
            break
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise IngestError(f"{path}: missing header key {key!r}")
    cell = header["cellsize"]
    if not cell > 0:
        raise IngestError(f"{path}: cellsize must be positive")
    if "xllcorner" in header:
        x0 = header["xllcorner"]
    elif "xllcenter" in header:
        x0 = header["xllcenter"] - cell / 2
    else:
        raise IngestError(f"{path}: missing xllcorner")
    if "yllcorner" in header:
        y0 = header["yllcorner"]
    elif "yllcenter" in header:
        y0 = header["yllcenter"] - cell / 2
    else:
        raise IngestError(f"{path}: missing yllcorner")
    _check_coords(x0, y0, f"{path}: header")
    ncols, nrows = int(header["ncols"]), int(header["nrows"])
    body = " ".join(lines[k:]).split()
    if len(body) != ncols * nrows:
        raise IngestError(f"{path}: expected {ncols * nrows} values, found {len(body)}")
    try:
        values = np.array(body, dtype=float).reshape(nrows, ncols)
    except ValueError as exc:
        raise IngestError(f"{path}: {exc}") from None
    return Raster(values, x0, y0, cell * 1000.0, header.get("nodata_value", -9999.0),
                  name or path.stem)


def write_raster(path, r: Raster):
    with open(path, "w") as fh:
        fh.write(f"ncols {r.n_cols}\nnrows {r.n_rows}\n")
        fh.write(f"xllcorner {r.x0!r}\nyllcorner {r.y0!r}\ncellsize {r.cell_km!r}\n")
        fh.write(f"NODATA_value {r.nodata!r}\n")
        for row in r.values:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")
