"""Periodic grids, scalar fields, parabolic cylinders and discrete norms.

All spatial data lives on a uniform lattice over the torus [0, L)^N, the
numerical stand-in for free space: problems are set up so that the data is
concentrated far from the wrap boundary.  Space integrals are midpoint sums
(h^N times a lattice sum), time integrals over stored frames are trapezoidal.

A parabolic cylinder Q_rho is the space-time box (-rho^2, 0) x B_rho in
"cylinder time", anchored at a caller-selected simulation time (usually the
final one), so analysis windows always look backward from the anchor.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field as dc_field
from functools import lru_cache

import numpy as np


class CoverageError(ValueError):
    """A requested space-time window is not covered by the stored frames."""


SNAPSHOT_MAGIC = b"RDSFLD1\n"


@dataclass(frozen=True)
class Grid:
    """Uniform periodic lattice on [0, L)^N with n points per axis."""

    dim: int
    n: int
    length: float

    def __post_init__(self):
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.n < 8 or (self.n & (self.n - 1)) != 0:
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if not self.length > 0:
            raise ValueError(f"box length must be positive, got {self.length}")

    @property
    def spacing(self):
        return self.length / self.n

    @property
    def shape(self):
        return (self.n,) * self.dim

    @property
    def cell_volume(self):
        return self.spacing ** self.dim

    def axis_coords(self):
        return np.arange(self.n) * self.spacing

    def center(self):
        return (self.length / 2.0,) * self.dim

    def nearest_index(self, point):
        """Lattice multi-index closest to a physical point (periodic)."""
        return tuple(int(round(c / self.spacing)) % self.n for c in point)


@dataclass(frozen=True)
class Ball:
    """Euclidean ball on the torus, measured with minimum-image distance."""

    center: tuple
    radius: float


@dataclass(frozen=True)
class Cylinder:
    """Parabolic cylinder (-rho^2, 0) x B_rho anchored at `anchor_t`.

    Cylinder time 0 corresponds to simulation time `anchor_t`; the window
    in simulation time is [anchor_t - rho^2, anchor_t].
    """

    radius: float
    center: tuple
    anchor_t: float

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("cylinder radius must be positive")

    @property
    def time_window(self):
        return (self.anchor_t - self.radius ** 2, self.anchor_t)

    def ball(self):
        return Ball(self.center, self.radius)


class Field:
    """Immutable scalar samples on a Grid.  Integrals are h^N * sum."""

    __slots__ = ("grid", "values")

    def __init__(self, grid, values):
        values = np.asarray(values, dtype=np.float64)
        if values.shape != grid.shape:
            raise ValueError(f"values shape {values.shape} != grid shape {grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field values must be finite (no NaN/Inf)")
        values = values.copy()
        values.setflags(write=False)
        self.grid = grid
        self.values = values

    def integral(self):
        return self.grid.cell_volume * float(self.values.sum())

    def min(self):
        return float(self.values.min())

    def max(self):
        return float(self.values.max())

    @classmethod
    def from_function(cls, grid, fn):
        """Sample fn(*coords) on the lattice; fn receives meshgrid arrays."""
        axes = [grid.axis_coords() for _ in range(grid.dim)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return cls(grid, fn(*mesh))

    @classmethod
    def zeros(cls, grid):
        return cls(grid, np.zeros(grid.shape))

    @classmethod
    def constant(cls, grid, c):
        return cls(grid, np.full(grid.shape, float(c)))


@dataclass
class SpeciesState:
    """The system unknown: p nonnegative concentration fields at one time."""

    time: float
    species: list

    def __post_init__(self):
        if len(self.species) < 1:
            raise ValueError("need at least one species field")
        g = self.species[0].grid
        for f in self.species[1:]:
            if f.grid != g:
                raise ValueError("all species must share one grid")

    @property
    def p(self):
        return len(self.species)

    @property
    def grid(self):
        return self.species[0].grid

    def values_array(self):
        """Stacked (p, *grid.shape) copy for numerical kernels."""
        return np.stack([f.values for f in self.species]).astype(np.float64)

    def min_value(self):
        return min(f.min() for f in self.species)

    @classmethod
    def from_array(cls, grid, time, arr):
        return cls(time, [Field(grid, a) for a in arr])


@dataclass
class StepRecord:
    """Per-step diagnostics logged by the integrator."""

    time: float
    dt: float
    rejects: int
    masses: tuple
    entropy: float
    dissipation: float
    min_value: float


@dataclass
class Trajectory:
    """Time-ordered states plus the integrator's step log."""

    states: list
    step_log: list = dc_field(default_factory=list)

    def __post_init__(self):
        t = self.times
        if len(t) >= 2 and not np.all(np.diff(t) > 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @property
    def times(self):
        return np.array([s.time for s in self.states])

    @property
    def grid(self):
        return self.states[0].grid

    @property
    def p(self):
        return self.states[0].p

    def state_at(self, t):
        """Stored state with timestamp nearest to t."""
        k = int(np.argmin(np.abs(self.times - t)))
        return self.states[k]

    def mass_series(self):
        return FieldSeries.from_trajectory(self, species="mass")


@dataclass
class FieldSeries:
    """A time-ordered sequence of Fields on one grid."""

    times: np.ndarray
    fields: list

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if len(self.times) != len(self.fields):
            raise ValueError("times and fields length mismatch")

    @property
    def grid(self):
        return self.fields[0].grid

    @classmethod
    def from_trajectory(cls, traj, species=0):
        """Extract one species, or the total mass with species='mass'."""
        if species == "mass":
            flds = [
                Field(s.grid, np.sum(s.values_array(), axis=0)) for s in traj.states
            ]
        else:
            flds = [s.species[species] for s in traj.states]
        return cls(traj.times, flds)

    def sup_norm(self):
        return max(float(np.abs(f.values).max()) for f in self.fields)


# ---------------------------------------------------------------------------
# Masks, distances and discrete differential operators
# ---------------------------------------------------------------------------

@lru_cache(maxsize=256)
def _ball_mask_cached(grid, center, radius):
    coords = grid.axis_coords()
    d2 = np.zeros(grid.shape)
    for a in range(grid.dim):
        delta = np.abs(coords - center[a])
        delta = np.minimum(delta, grid.length - delta)
        shape = [1] * grid.dim
        shape[a] = grid.n
        d2 = d2 + (delta.reshape(shape)) ** 2
    return d2 <= radius ** 2 + 1e-12 * radius ** 2

def ball_mask(grid, ball):
    """Boolean lattice mask of a periodic Euclidean ball."""
    if ball.radius > grid.length / 2:
        raise ValueError(
            f"ball radius {ball.radius} exceeds L/2 = {grid.length / 2}; "
            "the periodic wrap would double-count"
        )
    return _ball_mask_cached(grid, tuple(float(c) for c in ball.center), float(ball.radius))


def periodic_distance(grid, center):
    """Minimum-image Euclidean distance from `center` at every lattice point."""
    coords = grid.axis_coords()
    d2 = np.zeros(grid.shape)
    for a in range(grid.dim):
        delta = np.abs(coords - center[a])
        delta = np.minimum(delta, grid.length - delta)
        shape = [1] * grid.dim
        shape[a] = grid.n
        d2 = d2 + (delta.reshape(shape)) ** 2
    return np.sqrt(d2)


def periodic_laplacian(values, spacing):
    """Second-order centered stencil with periodic wrap."""
    out = np.zeros_like(values)
    for a in range(values.ndim):
        out += np.roll(values, 1, axis=a) + np.roll(values, -1, axis=a)
    out -= 2 * values.ndim * values
    return out / spacing ** 2


def gradient_sq(values, spacing, mask=None):
    """Pointwise squared gradient from forward (edge-based) differences.

    One-sided by construction, so kinks of truncated fields are never
    straddled.  With a mask, only edges based at masked points contribute.
    """
    gsq = np.zeros_like(values)
    for a in range(values.ndim):
        d = (np.roll(values, -1, axis=a) - values) / spacing
        gsq += d * d
    if mask is not None:
        gsq = np.where(mask, gsq, 0.0)
    return gsq


def dirichlet_energy(values, spacing, mask=None):
    """h^N-weighted integral of |grad|^2 (forward differences)."""
    return spacing ** values.ndim * float(gradient_sq(values, spacing, mask).sum())


# ---------------------------------------------------------------------------
# Norms
# ---------------------------------------------------------------------------

def lp_norm(f, region=None, p=2.0):
    """Discrete L^p norm of a Field over the full torus or a ball.

    p = inf returns the max of |f| over the region.
    """
    if region is None:
        vals = f.values
    else:
        vals = f.values[ball_mask(f.grid, region)]
    if vals.size == 0:
        raise ValueError("empty region for lp_norm")
    if np.isinf(p):
        return float(np.abs(vals).max())
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    hv = f.grid.cell_volume
    return float((hv * np.sum(np.abs(vals) ** p)) ** (1.0 / p))


def _window_frames(times, t0, t1):
    """Frame indices needed to integrate over [t0, t1], with coverage check."""
    tol = 1e-9 * max(1.0, abs(t0), abs(t1))
    if times[0] > t0 + tol or times[-1] < t1 - tol:
        raise CoverageError(
            f"frames cover [{times[0]:g}, {times[-1]:g}] but the window "
            f"[{t0:g}, {t1:g}] is required; missing "
            f"[{min(t0, times[0]):g}, {times[0]:g}] and/or "
            f"[{times[-1]:g}, {max(t1, times[-1]):g}]"
        )
    inside = np.where((times >= t0 - tol) & (times <= t1 + tol))[0]
    if inside.size == 0:
        raise CoverageError(f"no stored frame inside [{t0:g}, {t1:g}]")
    return inside


def cylinder_lp_norm(traj, cyl, species_index=None, p=1.0):
    """Space-time L^p norm over a parabolic cylinder.

    Trapezoidal in time (with linear interpolation of the spatial integral
    at the window endpoints), midpoint lattice sum in space.  Accepts a
    Trajectory plus species index, species='mass' style extraction being
    done by the caller via FieldSeries, or a FieldSeries directly.
    """
    if isinstance(traj, Trajectory):
        series = FieldSeries.from_trajectory(
            traj, species="mass" if species_index is None else species_index
        )
    else:
        series = traj
    t0, t1 = cyl.time_window
    times = series.times
    inside = _window_frames(times, t0, t1)
    mask = ball_mask(series.grid, cyl.ball())
    hv = series.grid.cell_volume

    if np.isinf(p):
        return max(float(np.abs(series.fields[k].values[mask]).max()) for k in inside)
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")

    def spatial(k):
        return hv * float(np.sum(np.abs(series.fields[k].values[mask]) ** p))

    knots = [times[k] for k in inside]
    gvals = [spatial(k) for k in inside]
    # clip the integration range exactly to the window
    if knots[0] > t0:
        k = inside[0]
        if k == 0:
            g0 = gvals[0]
        else:
            w = (knots[0] - t0) / (knots[0] - times[k - 1])
            g0 = (1 - w) * gvals[0] + w * spatial(k - 1)
        knots.insert(0, t0)
        gvals.insert(0, g0)
    if knots[-1] < t1:
        k = inside[-1]
        if k == len(times) - 1:
            g1 = gvals[-1]
        else:
            w = (t1 - knots[-1]) / (times[k + 1] - knots[-1])
            g1 = (1 - w) * gvals[-1] + w * spatial(k + 1)
        knots.append(t1)
        gvals.append(g1)
    integral = float(np.trapezoid(gvals, knots))
    return integral ** (1.0 / p)


def sup_oscillation(series, cyl):
    """osc = sup - inf of the sampled values over the discrete cylinder."""
    t0, t1 = cyl.time_window
    inside = _window_frames(series.times, t0, t1)
    mask = ball_mask(series.grid, cyl.ball())
    if not mask.any():
        raise ValueError("cylinder ball contains no lattice point")
    hi = -np.inf
    lo = np.inf
    for k in inside:
        v = series.fields[k].values[mask]
        hi = max(hi, float(v.max()))
        lo = min(lo, float(v.min()))
    return hi - lo


# ---------------------------------------------------------------------------
# Snapshot files
# ---------------------------------------------------------------------------

def write_snapshot(path, f, time=0.0):
    """Write a Field to the fixed binary snapshot format.

    Layout: 8-byte magic, then dim, n, L, time as little-endian float64,
    then the values in row-major order as little-endian float64.
    """
    with open(path, "wb") as fh:
        fh.write(SNAPSHOT_MAGIC)
        fh.write(struct.pack("<4d", float(f.grid.dim), float(f.grid.n),
                             float(f.grid.length), float(time)))
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_snapshot(path):
    """Read a snapshot file, returning (Field, time)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(SNAPSHOT_MAGIC))
        if magic != SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a field snapshot (bad magic {magic!r})")
        dim_f, n_f, length, time = struct.unpack("<4d", fh.read(32))
        if dim_f != int(dim_f) or n_f != int(n_f):
            raise ValueError(f"{path}: non-integer dim/n in header")
        grid = Grid(int(dim_f), int(n_f), length)
        raw = fh.read(8 * grid.n ** grid.dim)
        values = np.frombuffer(raw, dtype="<f8").reshape(grid.shape)
    return Field(grid, values), time
