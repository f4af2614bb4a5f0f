"""Explicit raster flood solver (local-inertial shallow-water equations).

Momentum keeps local acceleration, the water-surface slope and Manning
friction, and drops convective acceleration. Unit-width discharges live on
cell faces of a staggered grid:

* ``qx[r, c]`` is the face between columns ``c-1`` and ``c`` (positive east),
  so ``qx[:, 0]`` and ``qx[:, ncols]`` are the west/east domain edges;
* ``qy[r, c]`` is the face between rows ``r-1`` and ``r`` (positive south),
  so ``qy[0, :]`` and ``qy[nrows, :]`` are the north/south domain edges.

Faces touching a NODATA cell are closed. Domain edges are either closed or
free-outflow against a ghost cell of equal depth whose bed continues the
local bed slope; free-outflow edges only let water out.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from numba import njit

from .errors import NumericalError, ValidationError
from .hydrograph import BoundarySet
from .raster import Grid, format_value, write_ascii_grid

log = logging.getLogger(__name__)

G = 9.80665
SECONDS_PER_HOUR = 3600.0


@dataclass(frozen=True)
class SolverConfig:
    manning_n: float = 0.055
    alpha: float = 0.7
    dt_max: float = 10.0
    h_wet: float = 1e-3
    output_interval: float = 900.0
    open_edges: bool = True

    def __post_init__(self):
        for name in ("manning_n", "alpha", "dt_max", "h_wet", "output_interval"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValidationError(f"solver setting {name} must be positive, got {v}")
        if self.alpha > 1:
            raise ValidationError(f"alpha must be in (0, 1], got {self.alpha}")


@dataclass
class SolverState:
    dem: Grid
    h: np.ndarray
    qx: np.ndarray
    qy: np.ndarray
    t: float = 0.0
    inflow_volume: float = 0.0
    outflow_volume: float = 0.0
    clamp_correction: float = 0.0

    @classmethod
    def dry(cls, dem: Grid) -> "SolverState":
        nr, nc = dem.shape
        return cls(dem, np.zeros((nr, nc)), np.zeros((nr, nc + 1)), np.zeros((nr + 1, nc)))

    @classmethod
    def from_depth(cls, dem: Grid, h) -> "SolverState":
        state = cls.dry(dem)
        h = np.array(h, dtype=np.float64)
        if h.shape != dem.shape:
            raise ValidationError(f"depth array shape {h.shape} does not match DEM {dem.shape}")
        if (h < 0).any():
            raise ValidationError("initial depths must be non-negative")
        h[~dem.valid_mask] = 0.0
        state.h = h
        return state

    def copy(self) -> "SolverState":
        return replace(self, h=self.h.copy(), qx=self.qx.copy(), qy=self.qy.copy())

    @property
    def cell_area(self) -> float:
        return self.dem.cellsize**2

    @property
    def stored_volume(self) -> float:
        return float(self.h.sum()) * self.cell_area

    def mass_error(self) -> float:
        """Relative mass-ledger residual |stored - (in - out)| / max(in, 1 m3)."""
        return abs(self.stored_volume - (self.inflow_volume - self.outflow_volume)) / max(self.inflow_volume, 1.0)

    def depth_grid(self) -> Grid:
        vals = self.h.copy()
        vals[~self.dem.valid_mask] = self.dem.nodata
        return self.dem.with_values(vals)


@dataclass(frozen=True)
class MassRecord:
    t: float
    stored: float
    inflow: float
    outflow: float
    clamp_correction: float

    @property
    def residual(self) -> float:
        return self.stored - (self.inflow - self.outflow)


@dataclass
class DepthSeries:
    """Depth snapshots keyed by output step, plus the mass ledger.

    ``series[step]`` returns ``(t_seconds, Grid)``; iteration yields the same
    pairs in time order. Steps default to 0, 1, 2, ... but a series built
    from surrogate predictions may start later.
    """

    times: list = field(default_factory=list)
    grids: list = field(default_factory=list)
    ledger: list = field(default_factory=list)
    steps: list = field(default_factory=list)
    n_steps: int = 0

    def append(self, step: int, t: float, grid: Grid) -> None:
        self.steps.append(int(step))
        self.times.append(float(t))
        self.grids.append(grid)

    def __len__(self):
        return len(self.times)

    def __iter__(self) -> Iterator[tuple[float, Grid]]:
        return iter(zip(self.times, self.grids))

    def __getitem__(self, step: int) -> tuple[float, Grid]:
        try:
            k = self.steps.index(step)
        except ValueError:
            raise IndexError(f"no snapshot for output step {step}") from None
        return self.times[k], self.grids[k]

    def at_time(self, t: float, tol: float = 1e-6) -> Grid:
        for ti, g in zip(self.times, self.grids):
            if abs(ti - t) <= tol:
                return g
        raise ValidationError(f"no snapshot at t = {t} s")


# --------------------------------------------------------------------------- #
# Kernels                                                                     #
# --------------------------------------------------------------------------- #


@njit(cache=True)
def _face_flux(q, z_i, h_i, z_j, h_j, dx, dt, n2, h_wet):
    eta_i = z_i + h_i
    eta_j = z_j + h_j
    hf = max(eta_i, eta_j) - max(z_i, z_j)
    if hf <= h_wet:
        return 0.0
    slope = (eta_j - eta_i) / dx
    return (q - G * hf * dt * slope) / (1.0 + G * dt * n2 * abs(q) / hf ** (7.0 / 3.0))


@njit(cache=True)
def _edge_flux(q, z_e, h_e, z_in, in_valid, dx, dt, n2, h_wet, outward_sign):
    """Free-outflow flux through a domain edge; ``outward_sign`` is +1 for
    east/south edges and -1 for west/north edges."""
    if h_e <= h_wet or not in_valid:
        return 0.0
    # ghost bed continues the slope from the inner neighbour through the edge cell
    drop = z_in - z_e
    slope = -outward_sign * drop / dx
    qn = (q - G * h_e * dt * slope) / (1.0 + G * dt * n2 * abs(q) / h_e ** (7.0 / 3.0))
    if qn * outward_sign < 0.0:
        return 0.0
    return qn


@njit(cache=True)
def _step_kernel(z, valid, h, qx, qy, dx, dt, n2, h_wet, open_edges, src_rows, src_cols, src_q):
    """Advance one step in place.

    Returns (outflow_volume, clamp_volume, bad_row, bad_col); bad_row >= 0
    flags a non-finite value.
    """
    nr, nc = h.shape
    area = dx * dx

    # east-west faces
    for r in range(nr):
        for c in range(nc + 1):
            if c == 0 or c == nc:
                if not open_edges:
                    qx[r, c] = 0.0
                    continue
                if c == 0:
                    e, inn, sign = 0, 1, -1.0
                else:
                    e, inn, sign = nc - 1, nc - 2, 1.0
                if not valid[r, e]:
                    qx[r, c] = 0.0
                    continue
                in_ok = inn >= 0 and inn < nc and valid[r, inn]
                z_in = z[r, inn] if in_ok else z[r, e]
                qx[r, c] = _edge_flux(qx[r, c], z[r, e], h[r, e], z_in, in_ok, dx, dt, n2, h_wet, sign)
            else:
                if valid[r, c - 1] and valid[r, c]:
                    qx[r, c] = _face_flux(qx[r, c], z[r, c - 1], h[r, c - 1], z[r, c], h[r, c], dx, dt, n2, h_wet)
                else:
                    qx[r, c] = 0.0

    # north-south faces
    for r in range(nr + 1):
        for c in range(nc):
            if r == 0 or r == nr:
                if not open_edges:
                    qy[r, c] = 0.0
                    continue
                if r == 0:
                    e, inn, sign = 0, 1, -1.0
                else:
                    e, inn, sign = nr - 1, nr - 2, 1.0
                if not valid[e, c]:
                    qy[r, c] = 0.0
                    continue
                in_ok = inn >= 0 and inn < nr and valid[inn, c]
                z_in = z[inn, c] if in_ok else z[e, c]
                qy[r, c] = _edge_flux(qy[r, c], z[e, c], h[e, c], z_in, in_ok, dx, dt, n2, h_wet, sign)
            else:
                if valid[r - 1, c] and valid[r, c]:
                    qy[r, c] = _face_flux(qy[r, c], z[r - 1, c], h[r - 1, c], z[r, c], h[r, c], dx, dt, n2, h_wet)
                else:
                    qy[r, c] = 0.0

    outflow = 0.0
    for r in range(nr):
        outflow += max(-qx[r, 0], 0.0) + max(qx[r, nc], 0.0)
    for c in range(nc):
        outflow += max(-qy[0, c], 0.0) + max(qy[nr, c], 0.0)
    outflow *= dx * dt

    coef = dt / dx
    clamp = 0.0
    bad_r = -1
    bad_c = -1
    for r in range(nr):
        for c in range(nc):
            if not valid[r, c]:
                continue
            net_x = qx[r, c] - qx[r, c + 1]
            net_y = qy[r, c] - qy[r + 1, c]
            hn = h[r, c] + coef * (net_x + net_y)
            h[r, c] = hn
    for k in range(src_rows.shape[0]):
        h[src_rows[k], src_cols[k]] += src_q[k] * dt / area
    for r in range(nr):
        for c in range(nc):
            hn = h[r, c]
            if not np.isfinite(hn):
                if bad_r < 0:
                    bad_r = r
                    bad_c = c
            elif hn < 0.0:
                clamp -= hn * area
                h[r, c] = 0.0
    return outflow, clamp, bad_r, bad_c


@njit(cache=True)
def _max_depth(h):
    m = 0.0
    nr, nc = h.shape
    for r in range(nr):
        for c in range(nc):
            if h[r, c] > m:
                m = h[r, c]
    return m


@njit(cache=True)
def _interp_q(qtab, t0, dtq, t):
    s = (t - t0) / dtq
    n = qtab.shape[0]
    if s < 0.0 or s > n - 1:
        return 0.0
    i = int(s)
    if i >= n - 1:
        return qtab[n - 1]
    w = s - i
    return qtab[i] * (1.0 - w) + qtab[i + 1] * w


@njit(cache=True)
def _advance(z, valid, h, qx, qy, t, t_end, dx, n2, h_wet, alpha, dt_max, open_edges,
             src_rows, src_cols, src_tab, src_t0, src_dt):
    """Adaptive stepping from t to exactly t_end; all times in seconds."""
    nsrc = src_rows.shape[0]
    src_q = np.zeros(nsrc)
    inflow = 0.0
    outflow = 0.0
    clamp = 0.0
    steps = 0
    while t < t_end:
        hmax = _max_depth(h)
        dt = dt_max
        if hmax > h_wet:
            dt = min(dt_max, alpha * dx / math.sqrt(G * hmax))
        if t + dt >= t_end or t_end - (t + dt) < 1e-9 * dt:
            dt = t_end - t
        for k in range(nsrc):
            src_q[k] = _interp_q(src_tab[k], src_t0[k], src_dt[k], t)
            inflow += src_q[k] * dt
        out, cl, br, bc = _step_kernel(z, valid, h, qx, qy, dx, dt, n2, h_wet, open_edges, src_rows, src_cols, src_q)
        outflow += out
        clamp += cl
        steps += 1
        if br >= 0:
            return t, inflow, outflow, clamp, steps, br, bc
        t = t + dt
        if t_end - t < 1e-9:
            t = t_end
    return t, inflow, outflow, clamp, steps, -1, -1


# --------------------------------------------------------------------------- #
# Public API                                                                  #
# --------------------------------------------------------------------------- #


def stable_dt(state: SolverState, cfg: SolverConfig) -> float:
    """Largest stable step: min(dt_max, alpha * dx / sqrt(g * h_max))."""
    hmax = float(state.h.max()) if state.h.size else 0.0
    if hmax <= cfg.h_wet:
        return cfg.dt_max
    return min(cfg.dt_max, cfg.alpha * state.dem.cellsize / math.sqrt(G * hmax))


def _source_arrays(boundaries: BoundarySet):
    rows = np.array([b.row for b in boundaries], dtype=np.int64)
    cols = np.array([b.col for b in boundaries], dtype=np.int64)
    n = max((len(b.hydrograph) for b in boundaries), default=1)
    tab = np.zeros((len(boundaries), n))
    t0 = np.zeros(len(boundaries))
    dtq = np.ones(len(boundaries))
    for k, b in enumerate(boundaries):
        hq = b.hydrograph.padded(n)
        tab[k] = hq.q
        t0[k] = hq.t0 * SECONDS_PER_HOUR
        dtq[k] = hq.dt * SECONDS_PER_HOUR
    return rows, cols, tab, t0, dtq


def step(state: SolverState, boundaries: BoundarySet, dt: float, cfg: SolverConfig) -> SolverState:
    """One explicit update of fluxes then depths; returns a new state.

    Boundary discharge is taken at the start of the step.
    """
    if not dt > 0:
        raise ValidationError(f"dt must be positive, got {dt}")
    limit = stable_dt(state, cfg)
    if dt > limit * (1 + 1e-12):
        raise ValidationError(f"dt {dt} s exceeds the stable step {limit} s")
    boundaries = BoundarySet(boundaries)
    boundaries.validate_on(state.dem)
    new = state.copy()
    rows, cols, _, _, _ = _source_arrays(boundaries)
    q_now = np.array([b.hydrograph.at(state.t / SECONDS_PER_HOUR) for b in boundaries], dtype=np.float64)
    dem = state.dem
    out, clamp, br, bc = _step_kernel(
        dem.values, dem.valid_mask, new.h, new.qx, new.qy, dem.cellsize, dt,
        cfg.manning_n**2, cfg.h_wet, cfg.open_edges, rows, cols, q_now,
    )
    if br >= 0:
        raise NumericalError(f"numerical blow-up at t = {state.t} s in cell ({br}, {bc})")
    new.t = state.t + dt
    new.inflow_volume += float(q_now.sum()) * dt
    new.outflow_volume += out
    new.clamp_correction += clamp
    return new


def simulate(
    dem: Grid,
    boundaries: BoundarySet,
    cfg: SolverConfig,
    duration: float,
    initial: SolverState | None = None,
) -> DepthSeries:
    """Run from t = 0 to ``duration`` seconds, snapshotting every output interval.

    The first snapshot is the initial state at t = 0; the last is at the
    largest multiple of the output interval not exceeding ``duration``.
    """
    if not duration > 0:
        raise ValidationError(f"duration must be positive, got {duration}")
    boundaries = BoundarySet(boundaries)
    boundaries.validate_on(dem)
    state = SolverState.dry(dem) if initial is None else initial.copy()
    rows, cols, tab, t0, dtq = _source_arrays(boundaries)
    z = dem.values
    valid = dem.valid_mask
    n2 = cfg.manning_n**2

    n_out = int(math.floor(duration / cfg.output_interval + 1e-9))
    series = DepthSeries()

    def record():
        series.append(len(series), state.t, state.depth_grid())
        series.ledger.append(
            MassRecord(state.t, state.stored_volume, state.inflow_volume, state.outflow_volume, state.clamp_correction)
        )

    record()
    for k in range(1, n_out + 1):
        t_target = k * cfg.output_interval
        t, vin, vout, clamp, nsteps, br, bc = _advance(
            z, valid, state.h, state.qx, state.qy, state.t, t_target, dem.cellsize, n2,
            cfg.h_wet, cfg.alpha, cfg.dt_max, cfg.open_edges, rows, cols, tab, t0, dtq,
        )
        state.inflow_volume += vin
        state.outflow_volume += vout
        state.clamp_correction += clamp
        series.n_steps += nsteps
        if br >= 0:
            raise NumericalError(f"numerical blow-up at t = {t} s in cell ({br}, {bc})")
        state.t = t_target
        record()
    log.debug("simulated %.0f s in %d steps, mass error %.2e", duration, series.n_steps, state.mass_error())
    return series


def write_run(series: DepthSeries, run_dir) -> None:
    """Write ``wd_<step>.asc`` snapshots, ``series.csv`` and ``massbalance.csv``."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    with (run_dir / "series.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "t_seconds", "path"])
        for k, t, grid in zip(series.steps, series.times, series.grids):
            name = f"wd_{k}.asc"
            write_ascii_grid(grid, run_dir / name)
            w.writerow([k, format_value(t), name])
    with (run_dir / "massbalance.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "stored", "inflow", "outflow", "clamp_correction"])
        for rec in series.ledger:
            w.writerow([format_value(rec.t), repr(rec.stored), repr(rec.inflow), repr(rec.outflow), repr(rec.clamp_correction)])


def read_run(run_dir) -> DepthSeries:
    from .raster import read_ascii_grid

    run_dir = Path(run_dir)
    series = DepthSeries()
    with (run_dir / "series.csv").open(newline="") as fh:
        for row in csv.DictReader(fh):
            series.append(int(row["step"]), float(row["t_seconds"]), read_ascii_grid(run_dir / row["path"]))
    mb = run_dir / "massbalance.csv"
    if mb.exists():
        with mb.open(newline="") as fh:
            for row in csv.DictReader(fh):
                series.ledger.append(
                    MassRecord(*(float(row[k]) for k in ("t", "stored", "inflow", "outflow", "clamp_correction")))
                )
    return series
