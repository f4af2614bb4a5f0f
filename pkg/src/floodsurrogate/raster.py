"""Georeferenced rasters: ESRI ASCII grid I/O, bilinear coarsening,
building burning and station sampling.

Row 0 of ``Grid.values`` is the northernmost row, matching the order in
which ASCII grids store their body.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import AlignmentError, ParseError, ValidationError

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")
_HEADER_NAMES = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")
DEFAULT_NODATA = -9999.0


@dataclass(frozen=True, eq=False)
class Grid:
    """Single-band raster with a NODATA sentinel (never NaN)."""

    values: np.ndarray
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.size == 0:
            raise ValidationError(f"grid values must be a non-empty 2D array, got shape {values.shape}")
        if np.isnan(values).any():
            raise ValidationError("grid values contain NaN; use the nodata sentinel instead")
        if not (self.cellsize > 0 and math.isfinite(self.cellsize)):
            raise ValidationError(f"cellsize must be positive, got {self.cellsize}")
        if math.isnan(self.nodata):
            raise ValidationError("nodata sentinel must not be NaN")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "xll", float(self.xll))
        object.__setattr__(self, "yll", float(self.yll))
        object.__setattr__(self, "cellsize", float(self.cellsize))
        object.__setattr__(self, "nodata", float(self.nodata))

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)"""
        return (
            self.xll,
            self.yll,
            self.xll + self.ncols * self.cellsize,
            self.yll + self.nrows * self.cellsize,
        )

    @property
    def valid_mask(self) -> np.ndarray:
        return self.values != self.nodata

    def with_values(self, values: np.ndarray) -> "Grid":
        """Same georeferencing, new values."""
        return Grid(values, self.xll, self.yll, self.cellsize, self.nodata)

    def is_aligned(self, other: "Grid") -> bool:
        return (
            self.shape == other.shape
            and self.xll == other.xll
            and self.yll == other.yll
            and self.cellsize == other.cellsize
        )

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (x, y) arrays of cell-center coordinates, each nrows x ncols."""
        cols = np.arange(self.ncols)
        rows_from_south = self.nrows - 1 - np.arange(self.nrows)
        x = self.xll + (cols + 0.5) * self.cellsize
        y = self.yll + (rows_from_south + 0.5) * self.cellsize
        return np.broadcast_to(x, self.shape), np.broadcast_to(y[:, None], self.shape)

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.is_aligned(other)
            and self.nodata == other.nodata
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


def require_aligned(*grids: Grid) -> None:
    first = grids[0]
    for g in grids[1:]:
        if not first.is_aligned(g):
            raise AlignmentError(
                "grids are not aligned: "
                f"({first.ncols}x{first.nrows} @ {first.xll},{first.yll} cs {first.cellsize}) vs "
                f"({g.ncols}x{g.nrows} @ {g.xll},{g.yll} cs {g.cellsize})"
            )


# --------------------------------------------------------------------------- #
# ASCII grid I/O                                                              #
# --------------------------------------------------------------------------- #


def format_value(v: float) -> str:
    """Shortest text that parses back to exactly ``v``."""
    v = float(v)
    if v.is_integer() and abs(v) < 1e15:
        if v == 0 and math.copysign(1.0, v) < 0:
            return "-0"
        return str(int(v))
    return repr(v)


def read_ascii_grid(path) -> Grid:
    path = Path(path)
    with path.open("r") as fh:
        text = fh.read()
    lines = text.splitlines()
    if len(lines) < 6:
        raise ParseError(f"{path}: expected a 6-line header, file has {len(lines)} lines")

    header: dict[str, str] = {}
    for i, expected in enumerate(HEADER_KEYS):
        parts = lines[i].split()
        if len(parts) != 2:
            raise ParseError(f"{path}: malformed header line {i + 1} (expected key '{_HEADER_NAMES[i]}'): {lines[i]!r}")
        key, token = parts[0].lower(), parts[1]
        if key != expected:
            raise ParseError(f"{path}: header line {i + 1} has key '{parts[0]}', expected '{_HEADER_NAMES[i]}'")
        header[key] = token

    def _number(key, cast):
        try:
            return cast(header[key])
        except ValueError:
            raise ParseError(f"{path}: header key '{key}' has non-numeric value {header[key]!r}") from None

    ncols = _number("ncols", int)
    nrows = _number("nrows", int)
    if ncols <= 0:
        raise ParseError(f"{path}: header key 'ncols' must be positive, got {ncols}")
    if nrows <= 0:
        raise ParseError(f"{path}: header key 'nrows' must be positive, got {nrows}")
    xll = _number("xllcorner", float)
    yll = _number("yllcorner", float)
    cellsize = _number("cellsize", float)
    if not cellsize > 0:
        raise ParseError(f"{path}: header key 'cellsize' must be positive, got {cellsize}")
    nodata = _number("nodata_value", float)

    body = " ".join(lines[6:]).split()
    expected = nrows * ncols
    if len(body) != expected:
        raise ParseError(f"{path}: expected {expected} values ({nrows} rows x {ncols} cols), found {len(body)}")
    try:
        values = np.array([float(tok) for tok in body], dtype=np.float64).reshape(nrows, ncols)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric value in body ({exc})") from None
    if np.isnan(values).any():
        raise ParseError(f"{path}: body contains NaN")
    return Grid(values, xll, yll, cellsize, nodata)


def write_ascii_grid(grid: Grid, path) -> None:
    path = Path(path)
    nodata_token = format_value(grid.nodata)
    out = [
        f"ncols {grid.ncols}",
        f"nrows {grid.nrows}",
        f"xllcorner {format_value(grid.xll)}",
        f"yllcorner {format_value(grid.yll)}",
        f"cellsize {format_value(grid.cellsize)}",
        f"NODATA_value {nodata_token}",
    ]
    for row in grid.values:
        out.append(" ".join(nodata_token if v == grid.nodata else format_value(v) for v in row.tolist()))
    path.write_text("\n".join(out) + "\n")


# --------------------------------------------------------------------------- #
# Resampling                                                                  #
# --------------------------------------------------------------------------- #


def _axis_stencil(n_out: int, n_src: int, ratio: float):
    """Lower index, upper index and upper weight along one axis.

    Positions are measured in source-cell units from the lower-left origin,
    so that ``ratio == 1`` yields integer positions and zero weights exactly.
    """
    pos = (np.arange(n_out) + 0.5) * ratio - 0.5
    lo = np.floor(pos).astype(np.int64)
    lo = np.clip(lo, 0, n_src - 1)
    frac = pos - lo
    hi = np.minimum(lo + 1, n_src - 1)
    frac = np.where(hi == lo, 0.0, frac)
    return lo, hi, frac


def resample_bilinear(src: Grid, target_cellsize: float) -> Grid:
    """Coarsen ``src`` to ``target_cellsize`` by bilinear interpolation.

    The output shares the lower-left origin of ``src``; a partial last
    row/column is dropped. Each output value interpolates the four source
    cell centers surrounding the output cell center. Cells whose stencil
    includes a NODATA source cell with non-zero weight become NODATA.
    """
    target_cellsize = float(target_cellsize)
    if not target_cellsize > 0:
        raise ValidationError(f"target cellsize must be positive, got {target_cellsize}")
    if target_cellsize < src.cellsize:
        raise ValidationError(
            f"target cellsize {target_cellsize} is finer than source {src.cellsize}; upsampling is not supported"
        )
    if src.nrows < 2 or src.ncols < 2:
        raise ValidationError("bilinear resampling needs a source grid of at least 2x2 cells")

    ratio = target_cellsize / src.cellsize
    ncols_out = int(math.floor(src.ncols / ratio + 1e-9))
    nrows_out = int(math.floor(src.nrows / ratio + 1e-9))
    if ncols_out < 1 or nrows_out < 1:
        raise ValidationError(
            f"no overlap: a {target_cellsize} m cell does not fit in the {src.ncols}x{src.nrows} source grid"
        )

    c0, c1, fx = _axis_stencil(ncols_out, src.ncols, ratio)
    # rows counted from the south edge, then flipped to north-first indexing
    s0, s1, fy = _axis_stencil(nrows_out, src.nrows, ratio)
    r0 = src.nrows - 1 - s0
    r1 = src.nrows - 1 - s1
    r0, r1, fy = r0[::-1], r1[::-1], fy[::-1]

    v = src.values
    v00 = v[np.ix_(r0, c0)]
    v01 = v[np.ix_(r0, c1)]
    v10 = v[np.ix_(r1, c0)]
    v11 = v[np.ix_(r1, c1)]
    wx = fx[None, :]
    wy = fy[:, None]
    out = (v00 * (1.0 - wx) + v01 * wx) * (1.0 - wy) + (v10 * (1.0 - wx) + v11 * wx) * wy

    nd = src.nodata
    bad = (v00 == nd) | ((v01 == nd) & (wx > 0)) | ((v10 == nd) & (wy > 0)) | ((v11 == nd) & (wx > 0) & (wy > 0))
    # identity positions must reproduce the source value bit-for-bit
    exact = (wx == 0) & (wy == 0)
    out = np.where(exact, v00, out)
    out = np.where(bad, nd, out)
    return Grid(out, src.xll, src.yll, target_cellsize, nd)


# --------------------------------------------------------------------------- #
# Buildings                                                                   #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class BuildingSet:
    polygons: tuple
    height: float

    def __post_init__(self):
        if not self.height > 0:
            raise ValidationError(f"building height must be positive, got {self.height}")
        rings = []
        for k, poly in enumerate(self.polygons):
            ring = np.asarray(poly, dtype=np.float64)
            if ring.ndim != 2 or ring.shape[1] != 2:
                raise ValidationError(f"polygon {k}: vertices must be (x, y) pairs")
            if len(ring) == 0 or not np.array_equal(ring[0], ring[-1]):
                raise ValidationError(f"polygon {k}: ring is not closed (first vertex != last vertex)")
            distinct = {tuple(p) for p in ring[:-1].tolist()}
            if len(distinct) < 3:
                raise ValidationError(f"polygon {k}: degenerate ring with {len(distinct)} distinct vertices (need >= 3)")
            rings.append(ring)
        object.__setattr__(self, "polygons", tuple(rings))


def _points_in_ring(px: np.ndarray, py: np.ndarray, ring: np.ndarray, tol: float) -> np.ndarray:
    """Even-odd containment; points on an edge count as inside."""
    inside = np.zeros(px.shape, dtype=bool)
    on_edge = np.zeros(px.shape, dtype=bool)
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        crosses = (y1 > py) != (y2 > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_int = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_int)

        dx, dy = x2 - x1, y2 - y1
        seg_len = math.hypot(dx, dy)
        if seg_len == 0:
            continue
        cross = (px - x1) * dy - (py - y1) * dx
        t = ((px - x1) * dx + (py - y1) * dy) / (seg_len * seg_len)
        on_edge |= (np.abs(cross) <= tol * seg_len) & (t >= -1e-12) & (t <= 1 + 1e-12)
    return inside | on_edge


def building_mask(grid: Grid, buildings: BuildingSet) -> np.ndarray:
    """Boolean mask of cells whose center lies inside (or on) any footprint."""
    xc, yc = grid.cell_centers()
    mask = np.zeros(grid.shape, dtype=bool)
    tol = 1e-9 * grid.cellsize
    for ring in buildings.polygons:
        xmin, ymin = ring.min(axis=0)
        xmax, ymax = ring.max(axis=0)
        box = (xc >= xmin - tol) & (xc <= xmax + tol) & (yc >= ymin - tol) & (yc <= ymax + tol)
        if not box.any():
            continue
        rows, cols = np.nonzero(box)
        hit = _points_in_ring(xc[rows, cols], yc[rows, cols], ring, tol)
        mask[rows[hit], cols[hit]] = True
    return mask


def burn_buildings(dtm: Grid, buildings: BuildingSet) -> Grid:
    """Raise every building cell by the uniform building height (DTM -> DSM)."""
    mask = building_mask(dtm, buildings) & dtm.valid_mask
    out = dtm.values.copy()
    out[mask] += buildings.height
    return dtm.with_values(out)


def read_buildings(path, height: float) -> BuildingSet:
    """One polygon per line: comma-separated ``x y`` vertex pairs."""
    polygons = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            ring = [tuple(float(t) for t in pair.split()) for pair in line.split(",")]
        except ValueError:
            raise ParseError(f"{path}:{lineno}: non-numeric vertex") from None
        if any(len(p) != 2 for p in ring):
            raise ParseError(f"{path}:{lineno}: each vertex must be an 'x y' pair")
        polygons.append(ring)
    return BuildingSet(tuple(polygons), height)


def write_buildings(buildings: BuildingSet, path) -> None:
    lines = [
        ", ".join(f"{format_value(x)} {format_value(y)}" for x, y in ring.tolist())
        for ring in buildings.polygons
    ]
    Path(path).write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------- #
# Stations                                                                    #
# --------------------------------------------------------------------------- #


@dataclass(frozen=True)
class Station:
    name: str
    x: float
    y: float


@dataclass(frozen=True)
class StationSet:
    stations: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "stations", tuple(Station(*s) if not isinstance(s, Station) else s for s in self.stations))
        names = [s.name for s in self.stations]
        if len(set(names)) != len(names):
            raise ValidationError("station names must be unique")

    def __iter__(self):
        return iter(self.stations)

    def __len__(self):
        return len(self.stations)

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.stations]


def read_stations(path) -> StationSet:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["name", "x", "y"]:
            raise ParseError(f"{path}: station file must have header 'name,x,y'")
        try:
            rows = [Station(r["name"].strip(), float(r["x"]), float(r["y"])) for r in reader]
        except (TypeError, ValueError):
            raise ParseError(f"{path}: malformed station row") from None
    return StationSet(tuple(rows))


def write_stations(stations: StationSet, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["name", "x", "y"])
        for s in stations:
            w.writerow([s.name, format_value(s.x), format_value(s.y)])


def cell_of_point(grid: Grid, x: float, y: float, name: str = "point") -> tuple[int, int]:
    """(row, col) of the cell containing (x, y); the lower/left cell edge belongs to the cell."""
    xmin, ymin, xmax, ymax = grid.extent
    if not (xmin <= x <= xmax and ymin <= y <= ymax):
        raise ValidationError(f"station '{name}' at ({x}, {y}) lies outside the grid extent {grid.extent}")
    col = min(int(math.floor((x - grid.xll) / grid.cellsize)), grid.ncols - 1)
    row_s = min(int(math.floor((y - grid.yll) / grid.cellsize)), grid.nrows - 1)
    return grid.nrows - 1 - row_s, col


def sample_at_points(grid: Grid, stations: Iterable[Station]) -> list[tuple[str, float | None]]:
    """Nearest-cell values at each station; NODATA cells give ``None``."""
    out = []
    for s in stations:
        r, c = cell_of_point(grid, s.x, s.y, s.name)
        v = grid.values[r, c]
        out.append((s.name, None if v == grid.nodata else float(v)))
    return out


def station_cells(grid: Grid, stations: Sequence[Station]) -> list[tuple[int, int]]:
    return [cell_of_point(grid, s.x, s.y, s.name) for s in stations]
