"""Command-line entry point: ``floodsurrogate <command> ...``.

Exit codes: 0 success, 1 usage, 2 data/validation, 3 numerical failure.
Errors are also written to stderr as one JSON object per line. Set
``FLOODSURROGATE_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import evaluation, experiment, features, surrogate
from .errors import FloodSurrogateError, NumericalError
from .hydrograph import Boundary, BoundarySet, generate_synthetic_set, read_hydrograph_csv, write_hydrograph_csv
from .raster import burn_buildings, cell_of_point, read_ascii_grid, read_buildings, read_stations, \
    resample_bilinear, write_ascii_grid
from .scenes import write_scene
from .solver import SECONDS_PER_HOUR, SolverConfig, read_run, simulate, write_run

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
LOG_ENV = "FLOODSURROGATE_LOG"

log = logging.getLogger("floodsurrogate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _floats(s: str) -> list[float]:
    try:
        return [float(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None


def _ints(s: str) -> list[int]:
    try:
        return [int(v) for v in s.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _boundary(s: str) -> tuple[str, float, float]:
    parts = s.split(",")
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"boundary must be ID,X,Y, got {s!r}")
    try:
        return parts[0], float(parts[1]), float(parts[2])
    except ValueError:
        raise argparse.ArgumentTypeError(f"boundary coordinates must be numbers, got {s!r}") from None


def _add_solver_flags(p):
    d = SolverConfig()
    p.add_argument("--manning-n", type=float, default=d.manning_n)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--dt-max", type=float, default=d.dt_max)
    p.add_argument("--h-wet", type=float, default=d.h_wet)
    p.add_argument("--output-interval", type=float, default=d.output_interval, help="seconds")
    p.add_argument("--closed-edges", action="store_true", help="reflective domain edges")


def _solver_config(a) -> SolverConfig:
    return SolverConfig(manning_n=a.manning_n, alpha=a.alpha, dt_max=a.dt_max, h_wet=a.h_wet,
                        output_interval=a.output_interval, open_edges=not a.closed_edges)


# --------------------------------------------------------------------------- #
# Commands                                                                    #
# --------------------------------------------------------------------------- #


def cmd_dem_resample(a):
    write_ascii_grid(resample_bilinear(read_ascii_grid(a.input), a.cellsize), a.out)


def cmd_dem_burn(a):
    dtm = read_ascii_grid(a.dtm)
    write_ascii_grid(burn_buildings(dtm, read_buildings(a.buildings, a.height)), a.out)


def cmd_hydrograph_synth(a):
    bases = [h for p in a.base for h in read_hydrograph_csv(p)]
    if len(a.peaks) != len(bases):
        raise UsageError(f"got {len(bases)} base hydrographs but {len(a.peaks)} --peaks lists")
    synthetic = generate_synthetic_set(bases, a.peaks, a.enforce_main_river_dominance)
    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_sc = len(a.peaks[0])
    if any(len(p) != n_sc for p in a.peaks):
        raise UsageError("every --peaks list must have the same length (one entry per scenario)")
    n = len(bases)
    for k in range(n_sc):
        write_hydrograph_csv([synthetic[i * n_sc + k] for i in range(n)], out / f"scenario_{k}.csv")


def cmd_simulate(a):
    dem = read_ascii_grid(a.dem)
    hyds = {h.boundary_id: h for h in read_hydrograph_csv(a.hydrographs)}
    bounds = []
    for bid, x, y in a.boundary:
        if bid not in hyds:
            raise UsageError(f"boundary '{bid}' has no column in {a.hydrographs}")
        bounds.append(Boundary(bid, *cell_of_point(dem, x, y, bid), hyds[bid]))
    series = simulate(dem, BoundarySet(bounds), _solver_config(a), a.duration_h * SECONDS_PER_HOUR)
    write_run(series, a.out)


def cmd_dataset_build(a):
    dem = read_ascii_grid(a.dem)
    parts = []
    for k, (run_dir, hyd_csv) in enumerate(a.scenario):
        hyds = read_hydrograph_csv(hyd_csv)
        parts.append(features.scenario_dataset(hyds, read_run(run_dir), dem, a.n_ts, a.depth_threshold, f"s{k}"))
    ds = features.stack(parts)
    ds.norm = features.Normalizer.fit(ds.X)
    features.save_dataset(ds, a.out)


def cmd_train(a):
    ds = features.load_dataset(a.dataset)
    cfg = surrogate.TrainConfig(learning_rate=a.learning_rate, batch_size=a.batch_size, dropout_p=a.dropout,
                                patience=a.patience, min_delta=a.min_delta, max_epochs=a.max_epochs,
                                val_fraction=a.val_fraction, seed=a.seed)
    model = surrogate.init_model(ds.X.shape[1], ds.n_cells, seed=a.seed, dropout_p=a.dropout)
    model, history = surrogate.train(model, ds, cfg)
    surrogate.save_model(model, a.out)
    if a.history:
        surrogate.write_history(history, a.history)


def cmd_predict(a):
    model = surrogate.load_model(a.model)
    hyds = read_hydrograph_csv(a.hydrographs)
    n_ts = (model.arch.n_features - 1) // len(hyds) - 1
    if features.n_features(n_ts, len(hyds)) != model.arch.n_features:
        raise UsageError(f"model expects {model.arch.n_features} features; "
                         f"{len(hyds)} hydrographs cannot produce that")
    ds_dir = Path(a.dataset)
    cell_index = np.loadtxt(ds_dir / "cell_index.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    X, times_h = features.build_feature_matrix(hyds, n_ts)
    series = experiment.predict_series(model, X, times_h, cell_index, read_ascii_grid(a.dem), a.output_interval)
    write_run(series, a.out)


def cmd_evaluate(a):
    stations = read_stations(a.stations) if a.stations else None
    rep = evaluation.stage_report(read_run(a.obs), read_run(a.sim), a.stages, a.wet_threshold, stations,
                                  a.label, a.dem_type, a.resolution)
    evaluation.write_report([rep], a.out)
    if a.error_maps:
        evaluation.write_error_maps(read_run(a.obs), read_run(a.sim), a.stages, a.error_maps)


def cmd_report(a):
    rows = experiment.collect_reports(a.run_dir)
    out = open(a.out, "w", newline="") if a.out else sys.stdout
    try:
        out.write(",".join(evaluation.REPORT_COLUMNS) + "\n")
        for r in rows:
            out.write(",".join(r[c] for c in evaluation.REPORT_COLUMNS) + "\n")
    finally:
        if a.out:
            out.close()


def cmd_run(a):
    cfg = experiment.load_config(a.config)
    if a.output_dir:
        cfg.output_dir = str(Path(a.output_dir).resolve())
    results = experiment.run_experiment(cfg, jobs=a.jobs)
    failed = [r for r in results if not r.ok]
    for r in failed:
        _emit_error("leg", f"{experiment.leg_label(r.dem_type, r.resolution)}: {r.error}")
    if failed and len(failed) == len(results):
        return EXIT_DATA
    return EXIT_OK


def cmd_scene(a):
    write_scene(a.out)


# --------------------------------------------------------------------------- #
# Parser                                                                      #
# --------------------------------------------------------------------------- #


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="floodsurrogate", description="Raster flood solver and CNN depth surrogate.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    dem = sub.add_parser("dem", help="DEM processing")
    dsub = dem.add_subparsers(dest="dem_command", parser_class=_Parser)
    dsub.required = True
    s = dsub.add_parser("resample", help="bilinear coarsening")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--cellsize", type=float, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dem_resample)
    s = dsub.add_parser("burn", help="raise building footprints to make a DSM")
    s.add_argument("--dtm", required=True)
    s.add_argument("--buildings", required=True)
    s.add_argument("--height", type=float, default=5.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dem_burn)

    hyd = sub.add_parser("hydrograph", help="hydrograph tools")
    hsub = hyd.add_subparsers(dest="hyd_command", parser_class=_Parser)
    hsub.required = True
    s = hsub.add_parser("synth", help="scale base hydrographs to target peaks")
    s.add_argument("--base", action="append", required=True, help="base hydrograph CSV (repeatable)")
    s.add_argument("--peaks", action="append", type=_floats, required=True,
                   help="comma-separated peaks, one list per base in the same order")
    s.add_argument("--enforce-main-river-dominance", action="store_true")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_hydrograph_synth)

    s = sub.add_parser("simulate", help="run the raster solver")
    s.add_argument("--dem", required=True)
    s.add_argument("--hydrographs", required=True, help="CSV with one column per boundary")
    s.add_argument("--boundary", action="append", type=_boundary, required=True, help="ID,X,Y (repeatable)")
    s.add_argument("--duration-h", type=float, default=48.0)
    _add_solver_flags(s)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    ds = sub.add_parser("dataset", help="training data")
    dssub = ds.add_subparsers(dest="ds_command", parser_class=_Parser)
    dssub.required = True
    s = dssub.add_parser("build", help="assemble feature/target matrices")
    s.add_argument("--dem", required=True)
    s.add_argument("--scenario", nargs=2, action="append", required=True, metavar=("RUN_DIR", "HYDROGRAPH_CSV"))
    s.add_argument("--n-ts", type=int, default=8)
    s.add_argument("--depth-threshold", type=float, default=0.3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dataset_build)

    d = surrogate.TrainConfig()
    s = sub.add_parser("train", help="train the surrogate")
    s.add_argument("--dataset", required=True)
    s.add_argument("--learning-rate", type=float, default=d.learning_rate)
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--dropout", type=float, default=d.dropout_p)
    s.add_argument("--patience", type=int, default=d.patience)
    s.add_argument("--min-delta", type=float, default=d.min_delta)
    s.add_argument("--max-epochs", type=int, default=d.max_epochs)
    s.add_argument("--val-fraction", type=float, default=d.val_fraction)
    s.add_argument("--seed", type=int, default=d.seed)
    s.add_argument("--history")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("predict", help="surrogate depth grids for a hydrograph set")
    s.add_argument("--model", required=True)
    s.add_argument("--dataset", required=True, help="dataset directory (for cell_index.csv)")
    s.add_argument("--dem", required=True, help="grid template")
    s.add_argument("--hydrographs", required=True)
    s.add_argument("--output-interval", type=float, default=SolverConfig().output_interval)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("evaluate", help="stage metrics of sim against obs")
    s.add_argument("--obs", required=True)
    s.add_argument("--sim", required=True)
    s.add_argument("--stages", type=_ints, default=list(evaluation.DEFAULT_STAGES))
    s.add_argument("--wet-threshold", type=float, default=0.3)
    s.add_argument("--stations")
    s.add_argument("--label", default="")
    s.add_argument("--dem-type", default="")
    s.add_argument("--resolution", type=float, default=float("nan"))
    s.add_argument("--error-maps")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", help="concatenate per-leg reports of a run directory")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="full experiment from a YAML config")
    s.add_argument("--config", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--output-dir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("scene", help="write the synthetic mini-valley scene")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_scene)
    return p


def _emit_error(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        rc = args.func(args)
        return EXIT_OK if rc is None else rc
    except UsageError as exc:
        _emit_error("usage", str(exc))
        return EXIT_USAGE
    except (NumericalError, ArithmeticError) as exc:
        _emit_error("numerical", str(exc))
        return EXIT_NUMERICAL
    except (FloodSurrogateError, ValueError, OSError) as exc:
        _emit_error("validation", str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
