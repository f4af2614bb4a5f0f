"""Tests for depth-error and flood-extent metrics and stage reports."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bias_loop, counts_loop, f1_harmonic, rmse_loop

from floodsurrogate.errors import ValidationError
from floodsurrogate.evaluation import (
    REPORT_COLUMNS, ContingencyCounts, bias, contingency, error_map, precision_recall_f1, read_report,
    rmse, stage_report, write_error_maps, write_report, write_station_series,
)
from floodsurrogate.raster import Grid, Station, StationSet, read_ascii_grid
from floodsurrogate.solver import DepthSeries


def test_rmse_bias_example():
    assert rmse([0, 0, 0, 0], [1, -1, 1, -1]) == 1.0
    assert bias([0, 0, 0, 0], [1, -1, 1, -1]) == 0.0
    assert bias([1.0, 2.0], [2.0, 4.0]) == 1.5


def test_nodata_pairs_dropped():
    assert rmse([1.0, -9999.0], [2.0, 5.0], nodata=-9999.0) == 1.0
    with pytest.raises(ValidationError):
        rmse([-9999.0], [1.0], nodata=-9999.0)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 10), st.floats(0, 10)), min_size=1, max_size=50))
def test_metrics_match_loop_oracles(pairs):
    obs = [p[0] for p in pairs]
    sim = [p[1] for p in pairs]
    assert rmse(obs, sim) == pytest.approx(rmse_loop(obs, sim), rel=1e-12, abs=1e-12)
    assert bias(obs, sim) == pytest.approx(bias_loop(obs, sim), rel=1e-12, abs=1e-12)
    assert abs(bias(obs, sim)) <= rmse(obs, sim) + 1e-12


def test_contingency_matches_loop():
    rng = np.random.default_rng(0)
    o, s = rng.random((10, 12)), rng.random((10, 12))
    c = contingency(Grid(o, 0, 0, 1), Grid(s, 0, 0, 1), 0.3)
    assert (c.tp, c.tn, c.fp, c.fn) == counts_loop(o.ravel(), s.ravel(), 0.3)
    assert c.total == 120


def test_threshold_is_inclusive():
    c = contingency(Grid([[0.3]], 0, 0, 1), Grid([[0.3]], 0, 0, 1), 0.3)
    assert c.tp == 1


def test_contingency_skips_nodata():
    o = np.array([[0.5, -9999.0]])
    c = contingency(Grid(o, 0, 0, 1), Grid([[0.5, 0.5]], 0, 0, 1))
    assert c.total == 1


@pytest.mark.parametrize("p,r,f1", [(0.476, 0.992, 0.644), (0.316, 0.988, 0.479), (0.662, 0.999, 0.797)])
def test_reference_extent_triples(p, r, f1):
    assert f1_harmonic(p, r) == pytest.approx(f1, abs=1e-3)


def test_f1_identity():
    s = precision_recall_f1(ContingencyCounts(tp=40, tn=100, fp=10, fn=30))
    assert s.precision == 0.8 and s.recall == 40 / 70
    assert s.f1 == pytest.approx(f1_harmonic(s.precision, s.recall), abs=1e-15)
    assert not s.degenerate


def test_all_dry_is_flagged_degenerate():
    s = precision_recall_f1(ContingencyCounts(0, 10, 0, 0))
    assert tuple(s) == (0.0, 0.0, 0.0) and s.degenerate


def test_error_map_abs_and_nodata():
    o = Grid([[1.0, -9999.0], [0.0, 2.0]], 0, 0, 1)
    s = Grid([[0.5, 1.0], [0.25, 2.0]], 0, 0, 1)
    np.testing.assert_array_equal(error_map(o, s).values, [[0.5, -9999.0], [0.25, 0.0]])


def _series(grids, start=0):
    s = DepthSeries()
    for k, g in enumerate(grids, start):
        s.append(k, k * 900.0, g)
    return s


def test_stage_report_and_csv(tmp_path):
    rng = np.random.default_rng(1)
    obs = _series([Grid(rng.random((4, 4)), 0, 0, 10) for _ in range(5)])
    sim = _series([Grid(rng.random((4, 4)), 0, 0, 10) for _ in range(5)])
    rep = stage_report(obs, sim, [2, 4], 0.3, dem_label="DTM10", dem_type="DTM", resolution_m=10.0)
    r = rep.record(4)
    o, s = obs[4][1].values.ravel(), sim[4][1].values.ravel()
    assert r.rmse == pytest.approx(rmse_loop(o, s), abs=1e-12)
    assert (r.counts.tp, r.counts.tn, r.counts.fp, r.counts.fn) == counts_loop(o, s, 0.3)
    write_report([rep], tmp_path / "r.csv")
    rows = read_report(tmp_path / "r.csv")
    assert list(rows[0]) == list(REPORT_COLUMNS)
    assert [row["step"] for row in rows] == ["2", "4"]
    assert float(rows[1]["f1"]) == r.f1


def test_station_scope_pools_station_cells():
    obs = _series([Grid(np.zeros((2, 2)), 0, 0, 10)])
    sim = _series([Grid([[1.0, 0.0], [0.0, 3.0]], 0, 0, 10)])
    st_set = StationSet((Station("a", 5, 15), Station("b", 15, 5)))
    rep = stage_report(obs, sim, [0], 0.3, stations=st_set)
    assert rep.scope == "stations"
    assert rep.record(0).rmse == pytest.approx(np.sqrt(5.0))
    # extent scores still use the whole grid
    assert rep.record(0).counts.total == 4


def test_missing_stage_rejected():
    obs = _series([Grid(np.zeros((2, 2)), 0, 0, 1)])
    with pytest.raises(ValidationError, match="step 3"):
        stage_report(obs, obs, [3])


def test_error_maps_and_station_series(tmp_path):
    obs = _series([Grid(np.full((2, 2), k), 0, 0, 10) for k in range(3)])
    sim = _series([Grid(np.full((2, 2), 2.0 * k), 0, 0, 10) for k in range(1, 3)], start=1)
    write_error_maps(obs, sim, [2], tmp_path / "err")
    assert read_ascii_grid(tmp_path / "err" / "err_2.asc").values.max() == 2.0
    write_station_series(obs, sim, StationSet((Station("a", 5, 5),)), tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines == ["station,step,obs_m,sim_m", "a,1,1.0,2.0", "a,2,2.0,4.0"]
