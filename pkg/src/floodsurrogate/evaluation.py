"""Depth-error and flood-extent metrics, error maps and stage reports."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .raster import Grid, StationSet, require_aligned, station_cells, write_ascii_grid

log = logging.getLogger(__name__)

DEFAULT_STAGES = (48, 96, 144, 192)
REPORT_COLUMNS = (
    "dem_label", "dem_type", "resolution_m", "step", "rmse_m", "bias_m",
    "tp", "tn", "fp", "fn", "precision", "recall", "f1",
)


def _pairs(obs, sim, nodata=None) -> tuple[np.ndarray, np.ndarray]:
    o = np.asarray(obs, dtype=np.float64).ravel()
    s = np.asarray(sim, dtype=np.float64).ravel()
    if o.shape != s.shape:
        raise ValidationError(f"obs and sim lengths differ ({o.size} vs {s.size})")
    keep = np.isfinite(o) & np.isfinite(s)
    if nodata is not None:
        keep &= (o != nodata) & (s != nodata)
    o, s = o[keep], s[keep]
    if o.size == 0:
        raise ValidationError("no valid obs/sim pairs after NODATA masking")
    return o, s


def rmse(obs, sim, nodata=None) -> float:
    """sqrt(mean((sim - obs)^2)); NaN or ``nodata`` entries are dropped pairwise."""
    o, s = _pairs(obs, sim, nodata)
    d = s - o
    return math.sqrt(float(np.mean(d * d)))


def bias(obs, sim, nodata=None) -> float:
    """mean(sim - obs); positive means overestimation."""
    o, s = _pairs(obs, sim, nodata)
    return float(np.mean(s - o))


@dataclass(frozen=True)
class ContingencyCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def contingency(obs_grid: Grid, sim_grid: Grid, wet_threshold: float = 0.3) -> ContingencyCounts:
    """Wet/dry agreement over cells valid in both grids; wet iff depth >= threshold."""
    require_aligned(obs_grid, sim_grid)
    valid = obs_grid.valid_mask & sim_grid.valid_mask
    o = obs_grid.values[valid] >= wet_threshold
    s = sim_grid.values[valid] >= wet_threshold
    return ContingencyCounts(
        tp=int(np.count_nonzero(o & s)),
        tn=int(np.count_nonzero(~o & ~s)),
        fp=int(np.count_nonzero(~o & s)),
        fn=int(np.count_nonzero(o & ~s)),
    )


@dataclass(frozen=True)
class ExtentScores:
    precision: float
    recall: float
    f1: float
    degenerate: bool = False

    def __iter__(self):
        return iter((self.precision, self.recall, self.f1))


def precision_recall_f1(c: ContingencyCounts) -> ExtentScores:
    """Precision, recall and F1 = TP / (TP + (FP + FN)/2).

    Any 0/0 ratio is reported as 0 with ``degenerate`` set.
    """
    degenerate = False

    def ratio(num, den):
        nonlocal degenerate
        if den == 0:
            degenerate = True
            return 0.0
        return num / den

    p = ratio(c.tp, c.tp + c.fp)
    r = ratio(c.tp, c.tp + c.fn)
    f1 = ratio(c.tp, c.tp + 0.5 * (c.fp + c.fn))
    if degenerate:
        log.warning("degenerate contingency table %s; undefined scores reported as 0", c)
    return ExtentScores(p, r, f1, degenerate)


def error_map(obs_grid: Grid, sim_grid: Grid) -> Grid:
    """Cell-wise |sim - obs|; NODATA where either input is NODATA."""
    require_aligned(obs_grid, sim_grid)
    valid = obs_grid.valid_mask & sim_grid.valid_mask
    out = np.where(valid, np.abs(sim_grid.values - obs_grid.values), obs_grid.nodata)
    return obs_grid.with_values(out)


@dataclass(frozen=True)
class StageRecord:
    step: int
    rmse: float
    bias: float
    counts: ContingencyCounts
    precision: float
    recall: float
    f1: float
    degenerate: bool = False


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    scope: str = "grid"
    dem_label: str = ""
    dem_type: str = ""
    resolution_m: float = float("nan")

    def rows(self) -> list[dict]:
        out = []
        for r in self.records:
            out.append({
                "dem_label": self.dem_label,
                "dem_type": self.dem_type,
                "resolution_m": self.resolution_m,
                "step": r.step,
                "rmse_m": r.rmse,
                "bias_m": r.bias,
                "tp": r.counts.tp,
                "tn": r.counts.tn,
                "fp": r.counts.fp,
                "fn": r.counts.fn,
                "precision": r.precision,
                "recall": r.recall,
                "f1": r.f1,
            })
        return out

    def record(self, step: int) -> StageRecord:
        for r in self.records:
            if r.step == step:
                return r
        raise KeyError(step)


def _grid_at(series, step: int) -> Grid:
    try:
        _, grid = series[step]
    except (IndexError, KeyError):
        raise ValidationError(f"series has no output step {step}") from None
    return grid


def stage_report(
    series_obs,
    series_sim,
    stages: Sequence[int] = DEFAULT_STAGES,
    wet_threshold: float = 0.3,
    stations: StationSet | None = None,
    dem_label: str = "",
    dem_type: str = "",
    resolution_m: float = float("nan"),
) -> MetricsReport:
    """One record per stage step.

    ``series_*`` are indexable by output step and yield ``(t, Grid)``. Extent
    scores always use the full grid; with ``stations`` the RMSE/Bias are
    pooled over the station cells only.
    """
    report = MetricsReport(scope="stations" if stations else "grid", dem_label=dem_label,
                           dem_type=dem_type, resolution_m=resolution_m)
    for step in stages:
        obs = _grid_at(series_obs, step)
        sim = _grid_at(series_sim, step)
        require_aligned(obs, sim)
        valid = obs.valid_mask & sim.valid_mask
        if stations:
            cells = station_cells(obs, list(stations))
            rr = np.array([r for r, _ in cells])
            cc = np.array([c for _, c in cells])
            keep = valid[rr, cc]
            o, s = obs.values[rr, cc][keep], sim.values[rr, cc][keep]
        else:
            o, s = obs.values[valid], sim.values[valid]
        counts = contingency(obs, sim, wet_threshold)
        scores = precision_recall_f1(counts)
        report.records.append(StageRecord(
            step=int(step), rmse=rmse(o, s), bias=bias(o, s), counts=counts,
            precision=scores.precision, recall=scores.recall, f1=scores.f1, degenerate=scores.degenerate,
        ))
    return report


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_report(reports: Sequence[MetricsReport], path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for rep in reports:
            for row in rep.rows():
                w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def read_report(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_error_maps(series_obs, series_sim, stages: Sequence[int], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for step in stages:
        write_ascii_grid(error_map(_grid_at(series_obs, step), _grid_at(series_sim, step)), out / f"err_{step}.asc")


def write_station_series(series_obs, series_sim, stations: StationSet, path) -> None:
    """``station, step, obs_m, sim_m`` for every output step."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["station", "step", "obs_m", "sim_m"])
        steps = [k for k in series_sim.steps if k in set(series_obs.steps)]
        if not steps:
            raise ValidationError("observed and simulated series share no output steps")
        cells = station_cells(_grid_at(series_obs, steps[0]), list(stations))
        for st, (r, c) in zip(stations, cells):
            for k in steps:
                o = _grid_at(series_obs, k).values[r, c]
                s = _grid_at(series_sim, k).values[r, c]
                w.writerow([st.name, k, _fmt(float(o)), _fmt(float(s))])
