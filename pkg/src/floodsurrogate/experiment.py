"""End-to-end experiment: DEM variants -> solver runs -> dataset -> surrogate
-> prediction -> reports, one independent leg per (DEM type, resolution).
"""
from __future__ import annotations

import csv
import logging
import math
import shutil
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from . import evaluation, features, surrogate
from .errors import ValidationError
from .hydrograph import Boundary, BoundarySet, Hydrograph, generate_synthetic_set, read_hydrograph_csv
from .raster import (
    Grid, StationSet, burn_buildings, cell_of_point, read_ascii_grid, read_buildings, read_stations,
    resample_bilinear, write_ascii_grid,
)
from .solver import SECONDS_PER_HOUR, DepthSeries, SolverConfig, read_run, simulate, write_run

log = logging.getLogger(__name__)

DEM_TYPES = ("DTM", "DSM")


@dataclass
class BoundarySpec:
    id: str
    x: float
    y: float
    base_hydrograph: str
    peaks: list


@dataclass
class ExperimentConfig:
    dem_path: str
    boundaries: list
    test_hydrograph: str
    resolutions: list = field(default_factory=lambda: [30.0])
    dem_types: list = field(default_factory=lambda: ["DTM", "DSM"])
    buildings_path: str | None = None
    burn_height_m: float = 5.0
    enforce_main_river_dominance: bool = False
    solver: SolverConfig = field(default_factory=SolverConfig)
    duration_h: float = 48.0
    n_ts: int = 8
    depth_threshold: float = 0.3
    train: surrogate.TrainConfig = field(default_factory=surrogate.TrainConfig)
    stages: list = field(default_factory=lambda: list(evaluation.DEFAULT_STAGES))
    wet_threshold: float = 0.3
    stations_path: str | None = None
    output_dir: str = "out"
    seed: int = 0
    base_dir: str = "."

    def path(self, p: str | None) -> Path | None:
        if p is None:
            return None
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def validate(self) -> None:
        if not self.dem_types:
            raise ValidationError("at least one dem_type is required")
        for t in self.dem_types:
            if t not in DEM_TYPES:
                raise ValidationError(f"unknown dem_type {t!r}; expected one of {DEM_TYPES}")
        if "DSM" in self.dem_types and self.buildings_path is None:
            raise ValidationError("dem_type DSM requires buildings_path")
        if not self.boundaries:
            raise ValidationError("at least one boundary is required")
        if not self.resolutions:
            raise ValidationError("at least one resolution is required")
        counts = {len(b.peaks) for b in self.boundaries}
        if len(counts) != 1:
            raise ValidationError("every boundary must list the same number of peaks (one per scenario)")
        n_out = int(math.floor(self.duration_h * SECONDS_PER_HOUR / self.solver.output_interval + 1e-9))
        if self.stages and max(self.stages) > n_out:
            raise ValidationError(f"stage {max(self.stages)} exceeds the last output step {n_out}")
        if self.stages and min(self.stages) < self.n_ts:
            raise ValidationError(f"stage {min(self.stages)} precedes the first predicted step {self.n_ts}")


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    raw = yaml.safe_load(path.read_text())
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    try:
        sv = dict(raw.get("solver", {}))
        duration_h = float(sv.pop("duration_h", 48.0))
        if "output_interval_s" in sv:
            sv["output_interval"] = sv.pop("output_interval_s")
        solver = SolverConfig(**{k: float(v) if k != "open_edges" else bool(v) for k, v in sv.items()})

        su = dict(raw.get("surrogate", {}))
        n_ts = int(su.pop("n_ts", 8))
        depth_threshold = float(su.pop("depth_threshold", 0.3))
        seed = int(raw.get("seed", 0))
        train = surrogate.TrainConfig(seed=seed, **su)

        ev = dict(raw.get("evaluation", {}))
        cfg = ExperimentConfig(
            dem_path=raw["dem_path"],
            boundaries=[
                BoundarySpec(str(b["id"]), float(b["x"]), float(b["y"]), b["base_hydrograph"],
                             [float(p) for p in b["peaks"]])
                for b in raw["boundaries"]
            ],
            test_hydrograph=raw["test_hydrograph"],
            resolutions=[float(r) for r in raw.get("resolutions", [30.0])],
            dem_types=list(raw.get("dem_types", ["DTM", "DSM"])),
            buildings_path=raw.get("buildings_path"),
            burn_height_m=float(raw.get("burn_height_m", 5.0)),
            enforce_main_river_dominance=bool(raw.get("enforce_main_river_dominance", False)),
            solver=solver,
            duration_h=duration_h,
            n_ts=n_ts,
            depth_threshold=depth_threshold,
            train=train,
            stages=[int(s) for s in ev.get("stages", evaluation.DEFAULT_STAGES)],
            wet_threshold=float(ev.get("wet_threshold", 0.3)),
            stations_path=ev.get("stations_path"),
            output_dir=raw.get("output_dir", "out"),
            seed=seed,
            base_dir=str(path.parent),
        )
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: invalid config ({exc!r})") from None
    cfg.validate()
    return cfg


def config_echo(cfg: ExperimentConfig) -> str:
    d = asdict(cfg)
    d.pop("base_dir")
    return yaml.safe_dump(d, sort_keys=True)


# --------------------------------------------------------------------------- #
# Inputs                                                                      #
# --------------------------------------------------------------------------- #


def _pick(hydrographs: Sequence[Hydrograph], boundary_id: str, path) -> Hydrograph:
    for h in hydrographs:
        if h.boundary_id == boundary_id:
            return h
    if len(hydrographs) == 1:
        return Hydrograph(boundary_id, hydrographs[0].t0, hydrographs[0].dt, hydrographs[0].q)
    raise ValidationError(f"{path}: no column for boundary '{boundary_id}'")


def fit_horizon(h: Hydrograph, n: int) -> Hydrograph:
    """Zero-pad or truncate to exactly ``n`` ordinates."""
    if len(h) >= n:
        return Hydrograph(h.boundary_id, h.t0, h.dt, h.q[:n])
    return h.padded(n)


def scenario_hydrographs(cfg: ExperimentConfig) -> tuple[list[list[Hydrograph]], list[Hydrograph]]:
    """Training scenarios (each one hydrograph per boundary) and the test event."""
    bases = []
    for b in cfg.boundaries:
        p = cfg.path(b.base_hydrograph)
        bases.append(_pick(read_hydrograph_csv(p), b.id, p))
    peaks = [b.peaks for b in cfg.boundaries]
    synthetic = generate_synthetic_set(bases, peaks, cfg.enforce_main_river_dominance)
    n_sc = len(peaks[0])
    grouped = [synthetic[i * n_sc:(i + 1) * n_sc] for i in range(len(bases))]
    tp = cfg.path(cfg.test_hydrograph)
    test_all = read_hydrograph_csv(tp)
    test = [_pick(test_all, b.id, tp) for b in cfg.boundaries]

    ref = bases[0]
    for h in bases + test:
        if h.t0 != ref.t0 or h.dt != ref.dt:
            raise ValidationError(f"hydrograph '{h.boundary_id}' does not share t0/dt with '{ref.boundary_id}'")
    if abs(ref.dt * SECONDS_PER_HOUR - cfg.solver.output_interval) > 1e-6:
        raise ValidationError(
            f"hydrograph step {ref.dt} h must equal the solver output interval {cfg.solver.output_interval} s"
        )
    n = int(round(cfg.duration_h / ref.dt)) + 1
    scenarios = [[fit_horizon(grouped[i][k], n) for i in range(len(bases))] for k in range(n_sc)]
    return scenarios, [fit_horizon(h, n) for h in test]


def dem_variant(src: Grid, dem_type: str, resolution: float, cfg: ExperimentConfig) -> Grid:
    dtm = resample_bilinear(src, resolution)
    if dem_type == "DTM":
        return dtm
    return burn_buildings(dtm, read_buildings(cfg.path(cfg.buildings_path), cfg.burn_height_m))


def boundary_set(dem: Grid, cfg: ExperimentConfig, hydrographs: Sequence[Hydrograph]) -> BoundarySet:
    bs = BoundarySet(
        Boundary(b.id, *cell_of_point(dem, b.x, b.y, b.id), h) for b, h in zip(cfg.boundaries, hydrographs)
    )
    bs.validate_on(dem)
    return bs


def leg_seed(global_seed: int, dem_type: str, resolution: float) -> int:
    ss = np.random.SeedSequence([global_seed, DEM_TYPES.index(dem_type), int(round(resolution * 1000))])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def leg_label(dem_type: str, resolution: float) -> str:
    r = int(resolution) if float(resolution).is_integer() else resolution
    return f"{dem_type}{r}"


# --------------------------------------------------------------------------- #
# One leg                                                                     #
# --------------------------------------------------------------------------- #


def predict_series(model: surrogate.SurrogateModel, X: np.ndarray, times_h: np.ndarray,
                   cell_index: np.ndarray, template: Grid, output_interval: float) -> DepthSeries:
    """Surrogate depth grids (clamped at 0) keyed by output step."""
    P = model.predict(X)
    series = DepthSeries()
    for row, th in zip(P, times_h):
        t_s = float(th) * SECONDS_PER_HOUR
        series.append(int(round(t_s / output_interval)), t_s, features.scatter(row, cell_index, template))
    return series


@dataclass
class LegResult:
    dem_type: str
    resolution: float
    ok: bool
    report: evaluation.MetricsReport | None = None
    station_report: evaluation.MetricsReport | None = None
    error: str = ""
    epochs: int = 0
    epoch1_loss: float = float("nan")
    final_train_loss: float = float("nan")


def run_leg(cfg: ExperimentConfig, dem_type: str, resolution: float) -> LegResult:
    label = leg_label(dem_type, resolution)
    out = Path(cfg.path(cfg.output_dir)) / label
    if out.exists():
        shutil.rmtree(out)
    out.mkdir(parents=True)
    try:
        src = read_ascii_grid(cfg.path(cfg.dem_path))
        dem = dem_variant(src, dem_type, resolution, cfg)
        write_ascii_grid(dem, out / "dem.asc")
        scenarios, test = scenario_hydrographs(cfg)
        duration = cfg.duration_h * SECONDS_PER_HOUR

        parts = []
        for k, hs in enumerate(scenarios):
            log.info("%s: simulating training scenario %d", label, k)
            series = simulate(dem, boundary_set(dem, cfg, hs), cfg.solver, duration)
            write_run(series, out / "runs" / f"train_{k}")
            parts.append(features.scenario_dataset(hs, series, dem, cfg.n_ts, cfg.depth_threshold, f"train_{k}"))
        log.info("%s: simulating test event", label)
        test_series = simulate(dem, boundary_set(dem, cfg, test), cfg.solver, duration)
        write_run(test_series, out / "runs" / "test")

        ds = features.stack(parts)
        ds.norm = features.Normalizer.fit(ds.X)
        features.save_dataset(ds, out / "dataset")

        seed = leg_seed(cfg.seed, dem_type, resolution)
        model = surrogate.init_model(ds.X.shape[1], ds.n_cells, seed=seed, dropout_p=cfg.train.dropout_p)
        tcfg = surrogate.TrainConfig(**{**asdict(cfg.train), "seed": seed})
        log.info("%s: training on %d x %d -> %d", label, ds.n_samples, ds.X.shape[1], ds.n_cells)
        model, history = surrogate.train(model, ds, tcfg)
        surrogate.save_model(model, out / "model.bin")
        surrogate.write_history(history, out / "history.csv")

        X_test, times_h = features.build_feature_matrix(test, cfg.n_ts)
        pred = predict_series(model, X_test, times_h, ds.cell_index, dem, cfg.solver.output_interval)
        write_run(pred, out / "pred")

        report = evaluation.stage_report(test_series, pred, cfg.stages, cfg.wet_threshold, None,
                                         label, dem_type, resolution)
        evaluation.write_report([report], out / "report.csv")
        evaluation.write_error_maps(test_series, pred, cfg.stages, out / "errors")
        station_report = None
        if cfg.stations_path:
            stations = read_stations(cfg.path(cfg.stations_path))
            station_report = evaluation.stage_report(test_series, pred, cfg.stages, cfg.wet_threshold,
                                                     stations, label, dem_type, resolution)
            evaluation.write_report([station_report], out / "report_stations.csv")
            evaluation.write_station_series(test_series, pred, stations, out / f"stations_{label}.csv")
        return LegResult(dem_type, resolution, True, report, station_report, epochs=len(history),
                         epoch1_loss=history[0].train_loss, final_train_loss=model.final_train_loss)
    except Exception as exc:
        log.error("%s failed: %s", label, exc)
        (out / "FAILED").write_text(traceback.format_exc())
        return LegResult(dem_type, resolution, False, error=f"{type(exc).__name__}: {exc}")


def _run_leg_args(args):
    return run_leg(*args)


def run_experiment(cfg: ExperimentConfig, jobs: int = 1) -> list[LegResult]:
    """Run every (dem_type, resolution) leg and write ``summary.csv``.

    A failing leg is recorded in ``failures.csv`` and does not affect others.
    """
    cfg.validate()
    out = Path(cfg.path(cfg.output_dir))
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.echo").write_text(config_echo(cfg))
    legs = [(cfg, t, r) for t in cfg.dem_types for r in cfg.resolutions]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_leg_args, legs))
    else:
        results = [run_leg(*leg) for leg in legs]

    evaluation.write_report([r.report for r in results if r.ok], out / "summary.csv")
    station_reports = [r.station_report for r in results if r.ok and r.station_report is not None]
    if station_reports:
        evaluation.write_report(station_reports, out / "summary_stations.csv")
    with (out / "failures.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dem_label", "error"])
        for r in results:
            if not r.ok:
                w.writerow([leg_label(r.dem_type, r.resolution), r.error])
    return results


def collect_reports(out_dir) -> list[dict]:
    """Concatenate ``<leg>/report.csv`` rows found under ``out_dir``."""
    rows = []
    for p in sorted(Path(out_dir).glob("*/report.csv")):
        rows.extend(evaluation.read_report(p))
    return rows


def load_leg(out_dir, label: str):
    """(test solver series, predicted series) of a finished leg."""
    leg = Path(out_dir) / label
    return read_run(leg / "runs" / "test"), read_run(leg / "pred")
