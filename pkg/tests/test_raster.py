"""Tests for grid I/O, bilinear coarsening, building burning and stations."""
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from floodsurrogate.errors import AlignmentError, ParseError, ValidationError
from floodsurrogate.raster import (
    BuildingSet, Grid, Station, StationSet, building_mask, burn_buildings, cell_of_point,
    read_ascii_grid, read_buildings, read_stations, require_aligned, resample_bilinear,
    sample_at_points, write_ascii_grid, write_buildings, write_stations,
)


def affine_grid(nr, nc, cs, a=0.3, b=-0.7, c=12.5, xll=100.0, yll=200.0):
    g = Grid(np.zeros((nr, nc)), xll, yll, cs)
    x, y = g.cell_centers()
    return g.with_values(a * x + b * y + c), (a, b, c)


def bilinear_oracle(src: Grid, cs: float) -> np.ndarray:
    """Scalar-loop reference: interpolate the four surrounding source centers."""
    ratio = cs / src.cellsize
    nc = int(math.floor(src.ncols / ratio + 1e-9))
    nr = int(math.floor(src.nrows / ratio + 1e-9))
    out = np.empty((nr, nc))
    for i in range(nr):
        for j in range(nc):
            # output center in world coordinates -> fractional source index (south-based)
            x = src.xll + (j + 0.5) * cs
            y = src.yll + (nr - 1 - i + 0.5) * cs
            fx = (x - src.xll) / src.cellsize - 0.5
            fy = (y - src.yll) / src.cellsize - 0.5
            x0 = min(max(int(math.floor(fx)), 0), src.ncols - 1)
            y0 = min(max(int(math.floor(fy)), 0), src.nrows - 1)
            x1 = min(x0 + 1, src.ncols - 1)
            y1 = min(y0 + 1, src.nrows - 1)
            tx = 0.0 if x1 == x0 else fx - x0
            ty = 0.0 if y1 == y0 else fy - y0

            def v(ys, xs):
                return src.values[src.nrows - 1 - ys, xs]

            out[i, j] = ((v(y0, x0) * (1 - tx) + v(y0, x1) * tx) * (1 - ty)
                         + (v(y1, x0) * (1 - tx) + v(y1, x1) * tx) * ty)
    return out


# --------------------------------------------------------------------------- #
# ASCII grid I/O                                                              #
# --------------------------------------------------------------------------- #


def test_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(3)
    vals = rng.normal(50, 10, (7, 5))
    vals[0, 0] = -9999.0
    vals[3, 2] = 0.1 + 0.2
    g = Grid(vals, 1000.5, 2000.25, 2.5)
    write_ascii_grid(g, tmp_path / "g.asc")
    assert read_ascii_grid(tmp_path / "g.asc") == g


def test_header_is_case_insensitive(tmp_path):
    p = tmp_path / "g.asc"
    p.write_text("NCOLS 2\nnrows 2\nXLLCORNER 0\nyllcorner 0\nCellSize 1\nnodata_value -9999\n1 2\n3 4\n")
    g = read_ascii_grid(p)
    assert g.shape == (2, 2)
    assert g.values[1, 0] == 3.0


def test_missing_header_key_is_named(tmp_path):
    p = tmp_path / "g.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\nNODATA_value -9999\n1 2\n3 4\n")
    with pytest.raises(ParseError, match="cellsize"):
        read_ascii_grid(p)


def test_value_count_mismatch(tmp_path):
    p = tmp_path / "g.asc"
    p.write_text("ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3\n")
    with pytest.raises(ParseError, match="4"):
        read_ascii_grid(p)


def test_grid_rejects_nan():
    with pytest.raises(ValidationError):
        Grid(np.array([[1.0, np.nan]]), 0, 0, 1)


def test_require_aligned():
    a = Grid(np.zeros((2, 2)), 0, 0, 1)
    with pytest.raises(AlignmentError):
        require_aligned(a, Grid(np.zeros((2, 2)), 0.5, 0, 1))


# --------------------------------------------------------------------------- #
# Resampling                                                                  #
# --------------------------------------------------------------------------- #


def test_identity_resampling_is_bit_exact():
    rng = np.random.default_rng(0)
    vals = rng.normal(size=(9, 11))
    vals[4, 4] = -9999.0
    g = Grid(vals, 0, 0, 5)
    assert resample_bilinear(g, 5.0) == g


@pytest.mark.parametrize("factor", [1.5, 2.0, 3.0, 4.0, 7.0])
def test_matches_scalar_oracle(factor):
    rng = np.random.default_rng(int(factor * 10))
    g = Grid(rng.normal(size=(21, 17)), 10, 20, 2.0)
    out = resample_bilinear(g, 2.0 * factor)
    np.testing.assert_allclose(out.values, bilinear_oracle(g, 2.0 * factor), rtol=0, atol=1e-12)


@pytest.mark.parametrize("factor", [2.0, 3.0, 5.0, 6.0])
def test_affine_reproduced_interior(factor):
    src, (a, b, c) = affine_grid(30, 30, 1.0)
    out = resample_bilinear(src, factor)
    x, y = out.cell_centers()
    np.testing.assert_allclose(out.values, a * x + b * y + c, rtol=0, atol=1e-9)


def test_output_shape_drops_partial_cells():
    g = Grid(np.zeros((10, 7)), 0, 0, 1)
    out = resample_bilinear(g, 3)
    assert out.shape == (3, 2)
    assert (out.xll, out.yll) == (0.0, 0.0)


def test_nodata_propagates():
    vals = np.ones((6, 6))
    vals[2, 2] = -9999.0
    out = resample_bilinear(Grid(vals, 0, 0, 1), 2)
    assert (out.values == -9999.0).any()
    assert (out.values == 1.0).sum() + (out.values == -9999.0).sum() == out.values.size


def test_upsampling_rejected():
    with pytest.raises(ValidationError):
        resample_bilinear(Grid(np.zeros((4, 4)), 0, 0, 2), 1)


@settings(max_examples=40, deadline=None)
@given(
    nr=st.integers(4, 20), nc=st.integers(4, 20),
    factor=st.sampled_from([1.0, 2.0, 2.5, 3.0, 4.0]),
    a=st.floats(-5, 5), b=st.floats(-5, 5),
)
def test_affine_property(nr, nc, factor, a, b):
    src, _ = affine_grid(nr, nc, 1.0, a=a, b=b, c=1.0)
    if nr < factor or nc < factor:
        return
    out = resample_bilinear(src, factor)
    np.testing.assert_allclose(out.values, bilinear_oracle(src, factor), rtol=0, atol=1e-9)
    x, y = out.cell_centers()
    np.testing.assert_allclose(out.values, a * x + b * y + 1.0, rtol=0, atol=1e-9)
    # bilinear interpolation never leaves the source value range
    assert out.values.min() >= src.values.min() - 1e-9
    assert out.values.max() <= src.values.max() + 1e-9


# --------------------------------------------------------------------------- #
# Buildings                                                                   #
# --------------------------------------------------------------------------- #


def square(x0, y0, w):
    return [(x0, y0), (x0 + w, y0), (x0 + w, y0 + w), (x0, y0 + w), (x0, y0)]


def test_burn_raises_only_covered_cells():
    dtm = Grid(np.full((4, 4), 10.0), 0, 0, 1)
    dsm = burn_buildings(dtm, BuildingSet((square(1, 1, 2),), 5.0))
    expected = np.full((4, 4), 10.0)
    expected[1:3, 1:3] = 15.0
    np.testing.assert_array_equal(dsm.values, expected)


def test_boundary_center_counts_as_inside():
    dtm = Grid(np.zeros((3, 3)), 0, 0, 1)
    # right edge passes exactly through the centers of column 1
    mask = building_mask(dtm, BuildingSet((square(0, 0, 1.5),), 1.0))
    assert mask[2, 1] and mask[1, 1] and mask[1, 0]
    assert not mask[0].any() and not mask[:, 2].any()


def test_overlapping_buildings_not_double_counted():
    dtm = Grid(np.zeros((4, 4)), 0, 0, 1)
    dsm = burn_buildings(dtm, BuildingSet((square(0, 0, 3), square(1, 1, 3)), 2.0))
    assert dsm.values.max() == 2.0


def test_burn_leaves_nodata():
    vals = np.zeros((2, 2))
    vals[0, 0] = -9999.0
    dsm = burn_buildings(Grid(vals, 0, 0, 1), BuildingSet((square(0, 0, 2),), 3.0))
    assert dsm.values[0, 0] == -9999.0
    assert dsm.values[1, 1] == 3.0


@pytest.mark.parametrize("ring,msg", [
    ([(0, 0), (1, 0), (1, 1)], "closed"),
    ([(0, 0), (1, 0), (0, 0)], "degenerate"),
])
def test_invalid_polygons(ring, msg):
    with pytest.raises(ValidationError, match=msg):
        BuildingSet((ring,), 5.0)


def test_building_height_positive():
    with pytest.raises(ValidationError):
        BuildingSet((square(0, 0, 1),), 0.0)


def test_buildings_round_trip(tmp_path):
    b = BuildingSet((square(0, 0, 1.5), square(3, 4, 2)), 5.0)
    write_buildings(b, tmp_path / "b.txt")
    back = read_buildings(tmp_path / "b.txt", 5.0)
    for r1, r2 in zip(b.polygons, back.polygons):
        np.testing.assert_array_equal(r1, r2)


# --------------------------------------------------------------------------- #
# Stations                                                                    #
# --------------------------------------------------------------------------- #


def test_cell_of_point_and_sampling():
    vals = np.arange(12, dtype=float).reshape(3, 4)
    vals[0, 3] = -9999.0
    g = Grid(vals, 0, 0, 10)
    assert cell_of_point(g, 5, 5) == (2, 0)
    assert cell_of_point(g, 40, 30) == (0, 3)
    s = sample_at_points(g, [Station("a", 15, 25), Station("b", 35, 25)])
    assert s == [("a", 1.0), ("b", None)]


def test_station_outside_extent():
    g = Grid(np.zeros((2, 2)), 0, 0, 1)
    with pytest.raises(ValidationError, match="far"):
        sample_at_points(g, [Station("far", 5, 5)])


def test_station_names_unique():
    with pytest.raises(ValidationError):
        StationSet((Station("a", 0, 0), Station("a", 1, 1)))


def test_stations_round_trip(tmp_path):
    s = StationSet((Station("S1", 1.5, 2.0), Station("S2", 3.0, 4.25)))
    write_stations(s, tmp_path / "s.csv")
    assert read_stations(tmp_path / "s.csv") == s
