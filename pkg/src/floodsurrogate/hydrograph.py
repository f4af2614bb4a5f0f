"""Discharge hydrographs: CSV ingestion, peak scaling and synthetic sets."""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .raster import Grid, format_value

SPACING_TOL_H = 1e-9


@dataclass(frozen=True, eq=False)
class Hydrograph:
    """Uniformly sampled discharge series (m3/s) at one boundary.

    ``t0`` and ``dt`` are in hours.
    """

    boundary_id: str
    t0: float
    dt: float
    q: np.ndarray

    def __post_init__(self):
        q = np.array(self.q, dtype=np.float64).ravel()
        if q.size == 0:
            raise ValidationError(f"hydrograph '{self.boundary_id}' is empty")
        if not self.dt > 0:
            raise ValidationError(f"hydrograph '{self.boundary_id}': dt must be positive, got {self.dt}")
        if not np.isfinite(q).all():
            raise ValidationError(f"hydrograph '{self.boundary_id}' has non-finite discharge")
        if (q < 0).any():
            i = int(np.argmax(q < 0))
            raise ValidationError(f"hydrograph '{self.boundary_id}' has negative discharge {q[i]} at index {i}")
        q.setflags(write=False)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t0", float(self.t0))
        object.__setattr__(self, "dt", float(self.dt))

    def __len__(self):
        return self.q.size

    def __eq__(self, other):
        if not isinstance(other, Hydrograph):
            return NotImplemented
        return (
            self.boundary_id == other.boundary_id
            and self.t0 == other.t0
            and self.dt == other.dt
            and np.array_equal(self.q, other.q)
        )

    __hash__ = None

    @property
    def peak(self) -> float:
        return float(self.q.max())

    @property
    def times(self) -> np.ndarray:
        """Sample times in hours."""
        return self.t0 + self.dt * np.arange(self.q.size)

    @property
    def end(self) -> float:
        return self.t0 + self.dt * (self.q.size - 1)

    def at(self, t_hours: float) -> float:
        """Linearly interpolated discharge; zero outside the sampled span."""
        s = (t_hours - self.t0) / self.dt
        if s < 0 or s > self.q.size - 1:
            return 0.0
        i = int(s)
        if i >= self.q.size - 1:
            return float(self.q[-1])
        w = s - i
        return float(self.q[i] * (1.0 - w) + self.q[i + 1] * w)

    def padded(self, n: int) -> "Hydrograph":
        """Zero-pad (never truncate) to ``n`` ordinates."""
        if n <= self.q.size:
            return self
        return replace(self, q=np.concatenate([self.q, np.zeros(n - self.q.size)]))


@dataclass(frozen=True)
class Boundary:
    boundary_id: str
    row: int
    col: int
    hydrograph: Hydrograph


class BoundarySet(tuple):
    """Tuple of ``Boundary`` with unique ids."""

    def __new__(cls, boundaries=()):
        items = tuple(boundaries)
        ids = [b.boundary_id for b in items]
        if len(set(ids)) != len(ids):
            raise ValidationError(f"boundary ids must be unique, got {ids}")
        return super().__new__(cls, items)

    def validate_on(self, dem: Grid) -> None:
        for b in self:
            if not (0 <= b.row < dem.nrows and 0 <= b.col < dem.ncols):
                raise ValidationError(f"boundary '{b.boundary_id}' cell ({b.row}, {b.col}) is outside the grid")
            if dem.values[b.row, b.col] == dem.nodata:
                raise ValidationError(f"boundary '{b.boundary_id}' cell ({b.row}, {b.col}) is NODATA")


def read_hydrograph_csv(path) -> list[Hydrograph]:
    """Read ``t_hours,<id1>,<id2>,...``; one hydrograph per discharge column."""
    with Path(path).open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty hydrograph file")
    header = [c.strip() for c in rows[0]]
    if header[0] != "t_hours" or len(header) < 2:
        raise ParseError(f"{path}: header must be 't_hours,<id1>,...', got {','.join(header)}")
    data = rows[1:]
    if len(data) < 2:
        raise ValidationError(f"{path}: need at least two rows to infer the time step, found {len(data)}")
    try:
        table = np.array([[float(c) for c in r] for r in data], dtype=np.float64)
    except ValueError:
        raise ParseError(f"{path}: non-numeric entry") from None
    if table.shape[1] != len(header):
        raise ParseError(f"{path}: rows have {table.shape[1]} fields, header has {len(header)}")

    t = table[:, 0]
    dt = t[1] - t[0]
    if not dt > 0:
        raise ValidationError(f"{path}: times must be strictly increasing (row 3)")
    for i in range(2, len(t)):
        if abs((t[i] - t[i - 1]) - dt) > SPACING_TOL_H:
            # +2: one for the header line, one for 1-based numbering
            raise ValidationError(
                f"{path}: non-uniform time spacing at row {i + 2} (t={t[i]}, expected step {dt})"
            )
    out = []
    for j, bid in enumerate(header[1:], start=1):
        col = table[:, j]
        if (col < 0).any():
            i = int(np.argmax(col < 0))
            raise ValidationError(f"{path}: negative discharge in column '{bid}' at row {i + 2}")
        out.append(Hydrograph(bid, float(t[0]), float(dt), col))
    return out


def write_hydrograph_csv(hydrographs: Sequence[Hydrograph], path) -> None:
    if not hydrographs:
        raise ValidationError("nothing to write")
    ref = hydrographs[0]
    n = max(len(h) for h in hydrographs)
    for h in hydrographs:
        if h.t0 != ref.t0 or h.dt != ref.dt:
            raise ValidationError("hydrographs written to one CSV must share t0 and dt")
    padded = [h.padded(n) for h in hydrographs]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t_hours"] + [h.boundary_id for h in hydrographs])
        for i in range(n):
            w.writerow([format_value(ref.t0 + i * ref.dt)] + [format_value(h.q[i]) for h in padded])


def scale_to_peak(h: Hydrograph, peak_max: float) -> Hydrograph:
    """Multiply every ordinate by ``peak_max / peak(h)``."""
    q_max = h.peak
    if q_max <= 0:
        raise ValidationError(f"hydrograph '{h.boundary_id}' is all zero; scaling ratio undefined")
    if not peak_max >= q_max:
        raise ValidationError(
            f"requested peak {peak_max} is below the observed peak {q_max} of '{h.boundary_id}'"
        )
    if peak_max == q_max:
        return h
    q = h.q * (peak_max / q_max)
    # pin the peak ordinate(s) exactly
    q[h.q == q_max] = peak_max
    return replace(h, q=q)


def generate_synthetic_set(
    bases: Sequence[Hydrograph],
    peaks: Sequence[Sequence[float]],
    enforce_main_river_dominance: bool = False,
) -> list[Hydrograph]:
    """Scale each base hydrograph to each of its requested peaks.

    ``peaks[i]`` lists the target peaks for ``bases[i]``. The output is
    grouped by base, in the given order. With ``enforce_main_river_dominance``
    the first base is the main river and, for every scenario index k, its
    k-th peak must exceed the k-th peak of every tributary.
    """
    if len(bases) != len(peaks):
        raise ValidationError(f"{len(bases)} base hydrographs but {len(peaks)} peak lists")
    if enforce_main_river_dominance and len(bases) > 1:
        main = bases[0]
        for trib, trib_peaks in zip(bases[1:], peaks[1:]):
            for k, (pm, pt) in enumerate(zip(peaks[0], trib_peaks)):
                if not pm > pt:
                    raise ValidationError(
                        f"main river '{main.boundary_id}' peak {pm} does not dominate "
                        f"tributary '{trib.boundary_id}' peak {pt} (scenario {k})"
                    )
    out = []
    for base, plist in zip(bases, peaks):
        out.extend(scale_to_peak(base, p) for p in plist)
    return out
