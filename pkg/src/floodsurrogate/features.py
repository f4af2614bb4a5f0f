"""Feature/target matrices for the surrogate.

A feature row is ``[t_hours, q1_i, q1_{i-1}, ..., q1_{i-n_ts}, q2_i, ...]``
with boundaries in declared order; a target row holds the thresholded depth
of every non-NODATA cell in row-major order.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .hydrograph import Hydrograph
from .raster import Grid, format_value
from .solver import SECONDS_PER_HOUR, DepthSeries

STD_FLOOR = 1e-12
_Y_MAGIC = b"FSY1"


def n_features(n_ts: int, n_boundaries: int) -> int:
    return (n_ts + 1) * n_boundaries + 1


def build_feature_matrix(hydrographs: Sequence[Hydrograph], n_ts: int) -> tuple[np.ndarray, np.ndarray]:
    """Sliding-window features; returns (X, sample times in hours).

    One row per time index ``i`` in ``[n_ts, len)``.
    """
    if n_ts < 0:
        raise ValidationError(f"n_ts must be non-negative, got {n_ts}")
    if not hydrographs:
        raise ValidationError("at least one hydrograph is required")
    ref = hydrographs[0]
    for h in hydrographs[1:]:
        if h.t0 != ref.t0 or h.dt != ref.dt or len(h) != len(ref):
            raise ValidationError(
                f"hydrograph '{h.boundary_id}' time base (t0={h.t0}, dt={h.dt}, n={len(h)}) "
                f"differs from '{ref.boundary_id}' (t0={ref.t0}, dt={ref.dt}, n={len(ref)})"
            )
    n = len(ref)
    if n <= n_ts:
        raise ValidationError(f"hydrograph length {n} must exceed n_ts = {n_ts}")

    idx = np.arange(n_ts, n)
    times = ref.t0 + idx * ref.dt
    cols = [times]
    for h in hydrographs:
        for lag in range(n_ts + 1):
            cols.append(h.q[idx - lag])
    return np.column_stack(cols), times


def active_cells(dem: Grid) -> np.ndarray:
    """(row, col) of every non-NODATA cell, row-major; shape (n_cells, 2)."""
    return np.argwhere(dem.valid_mask)


def apply_threshold(depths: np.ndarray, depth_threshold: float) -> np.ndarray:
    return np.where(depths < depth_threshold, 0.0, depths)


def build_target_matrix(
    series: DepthSeries,
    sample_times_h: Sequence[float],
    dem: Grid,
    depth_threshold: float,
    tol_s: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Thresholded depths at each sample time; returns (Y, cell_index)."""
    cell_index = active_cells(dem)
    rows, cols = cell_index[:, 0], cell_index[:, 1]
    by_time = {round(t / tol_s): g for t, g in series}
    Y = np.empty((len(sample_times_h), len(cell_index)))
    for k, th in enumerate(sample_times_h):
        t_s = th * SECONDS_PER_HOUR
        grid = by_time.get(round(t_s / tol_s))
        if grid is None:
            raise ValidationError(f"no depth snapshot at sample time {th} h ({t_s} s)")
        if grid.shape != dem.shape:
            raise ValidationError(f"snapshot at {th} h has shape {grid.shape}, DEM has {dem.shape}")
        Y[k] = grid.values[rows, cols]
    Y = np.where(Y == dem.nodata, 0.0, Y)
    return apply_threshold(Y, depth_threshold), cell_index


def scatter(row: np.ndarray, cell_index: np.ndarray, template: Grid) -> Grid:
    """Place a target/prediction vector back onto the grid; other cells NODATA."""
    row = np.asarray(row, dtype=np.float64)
    if row.shape != (len(cell_index),):
        raise ValidationError(f"vector of length {row.size} does not match {len(cell_index)} active cells")
    vals = np.full(template.shape, template.nodata)
    vals[cell_index[:, 0], cell_index[:, 1]] = row
    return template.with_values(vals)


def gather(grid: Grid, cell_index: np.ndarray) -> np.ndarray:
    return grid.values[cell_index[:, 0], cell_index[:, 1]].copy()


@dataclass(frozen=True)
class Normalizer:
    """Per-feature mean and population standard deviation."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Normalizer":
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ValidationError("cannot fit a normalizer on an empty matrix")
        return cls(X.mean(axis=0), X.std(axis=0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.shape[-1] != self.mean.size:
            raise ValidationError(f"expected {self.mean.size} features, got {X.shape[-1]}")
        scale = np.where(self.std < STD_FLOOR, 1.0, self.std)
        return (X - self.mean) / scale


def fit_apply_normalizer(train_X: np.ndarray, any_X: np.ndarray) -> np.ndarray:
    return Normalizer.fit(train_X).apply(any_X)


@dataclass
class Dataset:
    X: np.ndarray
    Y: np.ndarray
    cell_index: np.ndarray
    norm: Normalizer | None = None
    # per-row (scenario, sample time in hours), for traceability of stacked rows
    origin: list | None = None

    def __post_init__(self):
        if self.X.shape[0] != self.Y.shape[0]:
            raise ValidationError(f"X has {self.X.shape[0]} rows but Y has {self.Y.shape[0]}")
        if self.Y.shape[1] != len(self.cell_index):
            raise ValidationError(f"Y has {self.Y.shape[1]} columns but cell_index has {len(self.cell_index)}")

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def n_cells(self) -> int:
        return self.Y.shape[1]

    def normalized_X(self) -> np.ndarray:
        return self.X if self.norm is None else self.norm.apply(self.X)


def stack(parts: Sequence[Dataset]) -> Dataset:
    """Concatenate scenario datasets vertically (same cell_index required)."""
    if not parts:
        raise ValidationError("nothing to stack")
    ci = parts[0].cell_index
    for p in parts[1:]:
        if not np.array_equal(p.cell_index, ci):
            raise ValidationError("datasets built on different grids cannot be stacked")
    origin = []
    for p in parts:
        origin.extend(p.origin or [None] * p.n_samples)
    return Dataset(np.vstack([p.X for p in parts]), np.vstack([p.Y for p in parts]), ci, None, origin)


def scenario_dataset(
    hydrographs: Sequence[Hydrograph],
    series: DepthSeries,
    dem: Grid,
    n_ts: int,
    depth_threshold: float,
    scenario: str = "",
) -> Dataset:
    X, times = build_feature_matrix(hydrographs, n_ts)
    Y, cell_index = build_target_matrix(series, times, dem, depth_threshold)
    return Dataset(X, Y, cell_index, None, [(scenario, float(t)) for t in times])


# --------------------------------------------------------------------------- #
# Persistence                                                                 #
# --------------------------------------------------------------------------- #


def _write_matrix_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([format_value(v) if isinstance(v, float) else v for v in r])


def save_dataset(ds: Dataset, out_dir) -> None:
    """``X.csv``, ``Y.bin``, ``cell_index.csv`` and ``norm.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_matrix_csv(out / "X.csv", [f"f{j}" for j in range(ds.X.shape[1])], ds.X.tolist())
    with (out / "Y.bin").open("wb") as fh:
        fh.write(_Y_MAGIC)
        fh.write(struct.pack("<QQ", *ds.Y.shape))
        fh.write(np.ascontiguousarray(ds.Y, dtype="<f8").tobytes())
    _write_matrix_csv(out / "cell_index.csv", ["row", "col"], ds.cell_index.tolist())
    if ds.norm is not None:
        _write_matrix_csv(
            out / "norm.csv", ["feature", "mean", "std"],
            [[j, float(m), float(s)] for j, (m, s) in enumerate(zip(ds.norm.mean, ds.norm.std))],
        )


def load_dataset(in_dir) -> Dataset:
    d = Path(in_dir)
    X = np.loadtxt(d / "X.csv", delimiter=",", skiprows=1, ndmin=2)
    raw = (d / "Y.bin").read_bytes()
    if raw[:4] != _Y_MAGIC or len(raw) < 20:
        raise ParseError(f"{d / 'Y.bin'}: bad header")
    n, m = struct.unpack("<QQ", raw[4:20])
    if len(raw) != 20 + 8 * n * m:
        raise ParseError(f"{d / 'Y.bin'}: expected {n}x{m} values, file size does not match")
    Y = np.frombuffer(raw[20:], dtype="<f8").reshape(n, m).astype(np.float64)
    ci = np.loadtxt(d / "cell_index.csv", delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    norm = None
    if (d / "norm.csv").exists():
        t = np.loadtxt(d / "norm.csv", delimiter=",", skiprows=1, ndmin=2)
        norm = Normalizer(t[:, 1].copy(), t[:, 2].copy())
    return Dataset(X, Y, ci, norm)
