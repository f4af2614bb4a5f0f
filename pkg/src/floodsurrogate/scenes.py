"""Synthetic demo scene: a 64 x 64 V-shaped valley at 10 m with a main
river entering from the north, two side tributaries, three rectangular
buildings and five stations.

Everything is generated deterministically so the full pipeline runs without
external data.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .hydrograph import Hydrograph, scale_to_peak, write_hydrograph_csv
from .raster import BuildingSet, Grid, Station, StationSet, write_ascii_grid, write_buildings, write_stations

NCOLS = NROWS = 64
CELLSIZE = 10.0
XLL, YLL = 1000.0, 2000.0
NODATA = -9999.0

# (boundary id, x, y); x/y at cell centers of the 10 m grid
BOUNDARY_POINTS = (
    ("upstream1", XLL + 32.5 * CELLSIZE, YLL + 62.5 * CELLSIZE),
    ("upstream2", XLL + 2.5 * CELLSIZE, YLL + 43.5 * CELLSIZE),
    ("upstream3", XLL + 61.5 * CELLSIZE, YLL + 23.5 * CELLSIZE),
)
BASE_PEAKS = (30.0, 6.0, 3.0)
TRAIN_PEAKS = ((30.0, 45.0, 60.0, 75.0), (6.0, 9.0, 12.0, 15.0), (3.0, 4.5, 6.0, 7.5))
TEST_PEAKS = (52.0, 10.5, 5.2)
DURATION_H = 48.0
DT_H = 0.25


def valley_dem() -> Grid:
    col = np.arange(NCOLS)
    row = np.arange(NROWS)
    x = (col + 0.5) * CELLSIZE
    y_from_south = (NROWS - 1 - row + 0.5) * CELLSIZE
    X, Y = np.meshgrid(x, y_from_south)
    xc = 32.5 * CELLSIZE

    z = 20.0 + 0.002 * Y + 0.015 * np.abs(X - xc)
    # gentle deterministic bed irregularity
    z += 0.15 * np.sin(X / 37.0) * np.cos(Y / 53.0)
    # main channel, ~30 m wide, 1.5 m deep
    z -= 1.5 * np.clip(1.0 - np.abs(X - xc) / 15.0, 0.0, 1.0)
    # tributary gullies joining from the west (north half) and east (south half)
    z -= 0.8 * np.clip(1.0 - np.abs(Y - 43.5 * CELLSIZE) / 12.0, 0.0, 1.0) * (X < xc)
    z -= 0.8 * np.clip(1.0 - np.abs(Y - 23.5 * CELLSIZE) / 12.0, 0.0, 1.0) * (X > xc)

    # NODATA corners on the upper valley walls
    z[:6, :6] = NODATA
    z[:6, -6:] = NODATA
    return Grid(np.round(z, 4), XLL, YLL, CELLSIZE, NODATA)


def buildings(height: float = 5.0) -> BuildingSet:
    def rect(x0, y0, w, h):
        x0, y0 = XLL + x0, YLL + y0
        return [(x0, y0), (x0 + w, y0), (x0 + w, y0 + h), (x0, y0 + h), (x0, y0)]

    return BuildingSet(
        (
            rect(380.0, 300.0, 40.0, 60.0),
            rect(230.0, 180.0, 50.0, 30.0),
            rect(250.0, 420.0, 30.0, 40.0),
        ),
        height,
    )


def stations() -> StationSet:
    pts = [
        ("S1", 325.0, 600.0),
        ("S2", 300.0, 455.0),
        ("S3", 345.0, 320.0),
        ("S4", 260.0, 150.0),
        ("S5", 325.0, 35.0),
    ]
    return StationSet(tuple(Station(n, XLL + x, YLL + y) for n, x, y in pts))


def base_hydrograph(boundary_id: str, peak: float, t_peak_h: float = 28.0, shape: float = 4.0,
                    base_fraction: float = 0.05) -> Hydrograph:
    """Gamma-shaped flood wave over the 48 h horizon at 15 min spacing."""
    t = np.arange(0.0, DURATION_H + DT_H / 2, DT_H)
    s = t / t_peak_h
    wave = np.where(s > 0, s**shape * np.exp(shape * (1.0 - s)), 0.0)
    q = peak * (base_fraction + (1.0 - base_fraction) * wave)
    return Hydrograph(boundary_id, 0.0, DT_H, q)


def training_sets() -> list[list[Hydrograph]]:
    """Four synthetic scenarios, each a list of three boundary hydrographs."""
    bases = [base_hydrograph(bid, p) for (bid, _, _), p in zip(BOUNDARY_POINTS, BASE_PEAKS)]
    n = len(TRAIN_PEAKS[0])
    return [[scale_to_peak(b, TRAIN_PEAKS[i][k]) for i, b in enumerate(bases)] for k in range(n)]


def test_set() -> list[Hydrograph]:
    """Held-out event: slightly later and broader than the training waves."""
    return [
        base_hydrograph(bid, p, t_peak_h=30.0, shape=3.5)
        for (bid, _, _), p in zip(BOUNDARY_POINTS, TEST_PEAKS)
    ]


def write_scene(out_dir) -> Path:
    """Write DEM, buildings, stations, hydrographs and a config file."""
    out = Path(out_dir)
    (out / "hydrographs").mkdir(parents=True, exist_ok=True)
    write_ascii_grid(valley_dem(), out / "dem10.asc")
    write_buildings(buildings(), out / "buildings.txt")
    write_stations(stations(), out / "stations.csv")

    bases = [base_hydrograph(bid, p) for (bid, _, _), p in zip(BOUNDARY_POINTS, BASE_PEAKS)]
    for b in bases:
        write_hydrograph_csv([b], out / "hydrographs" / f"base_{b.boundary_id}.csv")
    write_hydrograph_csv(test_set(), out / "hydrographs" / "test_event.csv")
    (out / "config.yaml").write_text(CONFIG_TEMPLATE)
    return out


CONFIG_TEMPLATE = """\
# Mini-valley experiment: DTM/DSM x 10/20 m.
dem_path: dem10.asc
buildings_path: buildings.txt
burn_height_m: 5.0
resolutions: [10, 20]
dem_types: [DTM, DSM]
boundaries:
  - id: upstream1
    x: 1325.0
    y: 2625.0
    base_hydrograph: hydrographs/base_upstream1.csv
    peaks: [30.0, 45.0, 60.0, 75.0]
  - id: upstream2
    x: 1025.0
    y: 2435.0
    base_hydrograph: hydrographs/base_upstream2.csv
    peaks: [6.0, 9.0, 12.0, 15.0]
  - id: upstream3
    x: 1615.0
    y: 2235.0
    base_hydrograph: hydrographs/base_upstream3.csv
    peaks: [3.0, 4.5, 6.0, 7.5]
enforce_main_river_dominance: true
test_hydrograph: hydrographs/test_event.csv
solver:
  manning_n: 0.055
  alpha: 0.7
  dt_max: 10.0
  h_wet: 0.001
  output_interval_s: 900.0
  duration_h: 48.0
surrogate:
  n_ts: 8
  depth_threshold: 0.3
  learning_rate: 0.01
  batch_size: 10
  dropout_p: 0.2
  patience: 5
  min_delta: 0.001
  max_epochs: 200
  val_fraction: 0.1
evaluation:
  stages: [48, 96, 144, 192]
  wet_threshold: 0.3
  stations_path: stations.csv
output_dir: out
seed: 20240601
"""
