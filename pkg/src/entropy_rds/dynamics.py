"""Time integration of the reaction-diffusion system.

The baseline scheme is IMEX with exact spectral diffusion: the reaction is
applied explicitly and each species is then multiplied in Fourier space by
the exact heat multiplier exp(-d_i |k|^2 dt).  Diffusion therefore conserves
each spatial mean to roundoff, so total mass moves only through the reaction
term, whose species sum vanishes identically.  An explicit centered-stencil
scheme is provided as a positivity-respecting alternative under the CFL
bound dt <= h^2 / (2 N d_max).

Nonnegativity is enforced by step rejection: a step whose result dips below
-negativity_tolerance is redone as two half steps, recursively, up to
`max_rejects` halvings; clipping is never used because it would corrupt the
mass-conservation audit.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft
from scipy.ndimage import map_coordinates

from entropy_rds.core import (
    CoverageError,
    Field,
    FieldSeries,
    Grid,
    SpeciesState,
    StepRecord,
    Trajectory,
    dirichlet_energy,
    periodic_distance,
    periodic_laplacian,
    read_snapshot,
    write_snapshot,
)
from entropy_rds.kinetics import reaction_rate_array

# regularization inside sqrt-gradients; the entropy integrand is singular at 0
SQRT_REG = 1e-14

_WORKERS = 1


def set_fft_workers(n):
    """Number of threads scipy.fft may use for transforms."""
    global _WORKERS
    _WORKERS = max(1, int(n))


class NegativityError(RuntimeError):
    """A step produced values below the negativity tolerance."""

    def __init__(self, species, index, value):
        self.species = species
        self.index = index
        self.value = value
        super().__init__(
            f"species {species} reached {value:.3e} at lattice index {index}"
        )


class SimulationError(RuntimeError):
    """Persistent step rejection; carries the partial trajectory."""

    def __init__(self, message, trajectory):
        self.trajectory = trajectory
        super().__init__(message)


@dataclass(frozen=True)
class DiffusionCoeffs:
    """Per-species scalar diffusion coefficients with their declared bounds."""

    d: tuple
    d_min: float
    d_max: float

    def __post_init__(self):
        if not 0 < self.d_min <= self.d_max:
            raise ValueError("need 0 < d_min <= d_max")
        for di in self.d:
            if not self.d_min <= di <= self.d_max:
                raise ValueError(
                    f"coefficient {di} outside declared bounds "
                    f"[{self.d_min}, {self.d_max}]"
                )

    @classmethod
    def from_values(cls, d):
        d = tuple(float(x) for x in d)
        return cls(d, min(d), max(d))


@dataclass
class SimConfig:
    dt_init: float = 1e-3
    t_end: float = 1.0
    scheme: str = "imex-spectral"
    negativity_tolerance: float = 1e-12
    max_rejects: int = 12
    output_cadence: int = 1
    diagnostics_stride: int = 1

    def __post_init__(self):
        if self.dt_init <= 0:
            raise ValueError("dt_init must be positive")
        if self.scheme not in ("imex-spectral", "explicit"):
            raise ValueError(f"unknown scheme {self.scheme!r}")


def explicit_dt_bound(grid, coeffs):
    return grid.spacing ** 2 / (2.0 * grid.dim * coeffs.d_max)


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def _wavenumber_sq(grid):
    k1 = 2.0 * np.pi * sfft.fftfreq(grid.n, d=grid.spacing)
    axes = []
    for a in range(grid.dim):
        k = k1 if a < grid.dim - 1 else 2.0 * np.pi * sfft.rfftfreq(grid.n, d=grid.spacing)
        shape = [1] * grid.dim
        shape[a] = len(k)
        axes.append((k ** 2).reshape(shape))
    out = axes[0]
    for k2 in axes[1:]:
        out = out + k2
    return out


def _spectral_multipliers(grid, coeffs, dt):
    k2 = _wavenumber_sq(grid)
    return np.stack([np.exp(-di * k2 * dt) for di in coeffs.d])


def _step_array(a, net, coeffs, dt, grid, scheme, mult=None):
    """One raw step on the stacked (p, ...) array; no rejection logic."""
    q = reaction_rate_array(net, a)
    if scheme == "imex-spectral":
        if mult is None:
            mult = _spectral_multipliers(grid, coeffs, dt)
        ahat = sfft.rfftn(a + dt * q, axes=tuple(range(1, grid.dim + 1)),
                          workers=_WORKERS)
        ahat *= mult
        return sfft.irfftn(ahat, s=grid.shape, axes=tuple(range(1, grid.dim + 1)),
                           workers=_WORKERS)
    # explicit centered stencil
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        out[i] = a[i] + dt * (coeffs.d[i] * periodic_laplacian(a[i], grid.spacing) + q[i])
    return out


def step(state, net, coeffs, dt, scheme="imex-spectral",
         negativity_tolerance=1e-12):
    """Advance one time step; raises NegativityError on a rejected step.

    The caller is expected to halve dt and retry on rejection (simulate does
    this by sub-stepping so the output time grid stays uniform).
    """
    grid = state.grid
    if scheme == "explicit" and dt > explicit_dt_bound(grid, coeffs) * (1 + 1e-12):
        raise ValueError(
            f"explicit dt {dt:g} exceeds stability bound "
            f"{explicit_dt_bound(grid, coeffs):g}"
        )
    a = _step_array(state.values_array(), net, coeffs, dt, grid, scheme)
    if a.min() < -negativity_tolerance:
        flat = int(np.argmin(a))
        idx = np.unravel_index(flat, a.shape)
        raise NegativityError(int(idx[0]), tuple(int(i) for i in idx[1:]),
                              float(a[idx]))
    return SpeciesState.from_array(grid, state.time + dt, a)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def entropy_of(a, cell_volume):
    """sum_i integral of a_i ln a_i with the 0 ln 0 := 0 convention."""
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(a > 0, a * np.log(np.maximum(a, SQRT_REG)), 0.0)
    return cell_volume * float(s.sum())


def dissipation_of(a, spacing):
    """sum_i integral of |grad sqrt(a_i)|^2, regularized at vacuum."""
    total = 0.0
    for i in range(a.shape[0]):
        total += dirichlet_energy(np.sqrt(np.maximum(a[i], 0.0) + SQRT_REG), spacing)
    return total


def _diagnostics(a, t, dt, rejects, grid):
    masses = tuple(grid.cell_volume * float(a[i].sum()) for i in range(a.shape[0]))
    return StepRecord(
        time=t,
        dt=dt,
        rejects=rejects,
        masses=masses,
        entropy=entropy_of(a, grid.cell_volume),
        dissipation=dissipation_of(a, grid.spacing),
        min_value=float(a.min()),
    )


def boundary_mass_fraction(state):
    """Fraction of total mass in the outermost lattice shell.

    The torus stands in for free space only while this stays tiny; runs
    where it exceeds ~1e-8 should be treated as contaminated by wrap.
    """
    grid = state.grid
    dist = periodic_distance(grid, grid.center())
    shell = dist > (grid.length / 2.0 - 1.5 * grid.spacing)
    a = state.values_array()
    total = float(a.sum())
    if total <= 0:
        return 0.0
    return float(a[:, shell].sum()) / total


# ---------------------------------------------------------------------------
# Trajectory integration
# ---------------------------------------------------------------------------

def simulate(init, net, coeffs, cfg):
    """Integrate to cfg.t_end, collecting frames and per-step diagnostics.

    Deterministic for a given config.  Raises SimulationError (carrying the
    partial trajectory) if a step keeps violating nonnegativity after
    cfg.max_rejects halvings.
    """
    grid = init.grid
    if init.min_value() < -cfg.negativity_tolerance:
        raise ValueError("initial state violates nonnegativity")
    if len(coeffs.d) != init.p:
        raise ValueError("coefficient count != species count")
    if cfg.scheme == "explicit":
        bound = explicit_dt_bound(grid, coeffs)
        if cfg.dt_init > bound * (1 + 1e-12):
            raise ValueError(f"dt_init {cfg.dt_init:g} exceeds explicit bound {bound:g}")

    # uniform macro steps landing exactly on t_end
    span = cfg.t_end - init.time
    if span <= 0:
        raise ValueError("t_end must exceed the initial time")
    n_steps = max(1, int(round(span / cfg.dt_init)))
    dt = span / n_steps

    mult_cache = {}

    def multipliers(local_dt):
        if cfg.scheme != "imex-spectral":
            return None
        if local_dt not in mult_cache:
            mult_cache[local_dt] = _spectral_multipliers(grid, coeffs, local_dt)
        return mult_cache[local_dt]

    a = init.values_array()
    t0 = init.time
    states = [init]
    log = [_diagnostics(a, t0, dt, 0, grid)]

    def attempt(arr, local_dt, depth):
        out = _step_array(arr, net, coeffs, local_dt, grid, cfg.scheme,
                          multipliers(local_dt))
        if out.min() >= -cfg.negativity_tolerance:
            return out, 0
        if depth >= cfg.max_rejects:
            flat = int(np.argmin(out))
            idx = np.unravel_index(flat, out.shape)
            raise NegativityError(int(idx[0]), tuple(int(i) for i in idx[1:]),
                                  float(out[idx]))
        half = local_dt / 2.0
        mid, r1 = attempt(arr, half, depth + 1)
        fin, r2 = attempt(mid, half, depth + 1)
        return fin, 1 + r1 + r2

    for k in range(1, n_steps + 1):
        t = t0 + k * dt
        try:
            a, rejects = attempt(a, dt, 0)
        except NegativityError as exc:
            partial = Trajectory(states, log)
            raise SimulationError(
                f"step to t={t:g} rejected {cfg.max_rejects} times: {exc}", partial
            ) from exc
        if k % cfg.diagnostics_stride == 0 or k == n_steps:
            log.append(_diagnostics(a, t, dt, rejects, grid))
        if k % cfg.output_cadence == 0 or k == n_steps:
            states.append(SpeciesState.from_array(grid, t, a))

    return Trajectory(states, log)


# ---------------------------------------------------------------------------
# Rescaling
# ---------------------------------------------------------------------------

def _resample_at(field_values, grid, center, out_shape):
    """Sample values at center + eps * y_j for the rescaled lattice y_j.

    With the output torus of length L/eps on the same lattice count, the
    sample points center + eps * j * h/eps = center + j*h are independent of
    eps: the source lattice shifted to `center`.  Multilinear periodic
    interpolation handles off-lattice centers; lattice-aligned centers are
    resampled exactly.
    """
    n = grid.n
    h = grid.spacing
    base = [c / h for c in center]
    axes = [base[a] + np.arange(n) for a in range(grid.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([m.ravel() for m in mesh])
    out = map_coordinates(field_values, coords, order=1, mode="grid-wrap")
    return out.reshape(out_shape)


def rescale(traj, center, eps, q, frames_per_unit=33):
    """Parabolic zoom a -> eps^(2/(q-1)) a(t + eps^2 s, x + eps y) on (-4, 0).

    The output trajectory lives on a torus of length L/eps with the same
    lattice count, so for lattice-aligned centers the spatial resampling is
    exact.  Time is linearly interpolated onto a uniform grid.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    t_c, x_c = center
    grid = traj.grid
    times = traj.times
    window = (t_c - 4.0 * eps ** 2, t_c)
    tol = 1e-9 * max(1.0, abs(t_c))
    if times[0] > window[0] + tol or times[-1] < window[1] - tol:
        raise CoverageError(
            f"rescale window [{window[0]:g}, {window[1]:g}] escapes the "
            f"trajectory range [{times[0]:g}, {times[-1]:g}]"
        )

    new_grid = Grid(grid.dim, grid.n, grid.length / eps)
    amp = eps ** (2.0 / (q - 1.0))
    n_frames = 4 * frames_per_unit + 1
    s_grid = np.linspace(-4.0, 0.0, n_frames)

    stacked = [st.values_array() for st in traj.states]
    states = []
    for s in s_grid:
        tau = t_c + eps ** 2 * s
        j = int(np.clip(np.searchsorted(times, tau) - 1, 0, len(times) - 2))
        w = (tau - times[j]) / (times[j + 1] - times[j])
        w = float(np.clip(w, 0.0, 1.0))
        arr = (1 - w) * stacked[j] + w * stacked[j + 1]
        vals = np.stack([
            _resample_at(arr[i], grid, x_c, new_grid.shape)
            for i in range(arr.shape[0])
        ])
        states.append(SpeciesState.from_array(new_grid, s, amp * vals))

    ds = s_grid[1] - s_grid[0]
    log = [
        _diagnostics(st.values_array(), st.time, ds, 0, new_grid) for st in states
    ]
    return Trajectory(states, log)


# ---------------------------------------------------------------------------
# Residuals and scalar evolutions
# ---------------------------------------------------------------------------

def pde_residual(traj, net, coeffs, t):
    """Discrete residual of the evolution at an interior frame time.

    Centered difference in time between the stored neighbors, centered
    stencil in space: (a(t+dt) - a(t-dt)) / (2 dt) - d_i Lap a_i(t) - Q_i.
    """
    times = traj.times
    j = int(np.argmin(np.abs(times - t)))
    if j == 0 or j == len(times) - 1:
        raise ValueError("t must be interior to the trajectory for a centered difference")
    grid = traj.grid
    am = traj.states[j - 1].values_array()
    a0 = traj.states[j].values_array()
    ap = traj.states[j + 1].values_array()
    q = reaction_rate_array(net, a0)
    res = []
    denom = times[j + 1] - times[j - 1]
    for i in range(traj.p):
        r = (ap[i] - am[i]) / denom \
            - coeffs.d[i] * periodic_laplacian(a0[i], grid.spacing) - q[i]
        res.append(Field(grid, r))
    return res


def evolve_scalar_diffusion(phi0, d, t_end, dt, store_every=1):
    """Explicit evolution of the nonconservative equation dphi/dt = d Lap phi.

    `d` is a constant, an array on the grid, or a callable t -> array, with
    values that must stay within positive bounds chosen by the caller; the
    CFL restriction dt <= h^2/(2 N max d) is the caller's responsibility for
    callables and is checked for static coefficients.
    """
    grid = phi0.grid
    if callable(d):
        d_fn = d
    else:
        d_arr = np.broadcast_to(np.asarray(d, dtype=float), grid.shape)
        if dt > grid.spacing ** 2 / (2 * grid.dim * float(d_arr.max())) * (1 + 1e-12):
            raise ValueError("dt exceeds the explicit stability bound")
        d_fn = lambda t: d_arr
    v = phi0.values.copy()
    t = 0.0
    times = [0.0]
    fields = [phi0]
    n_steps = int(round(t_end / dt))
    for k in range(1, n_steps + 1):
        v = v + dt * d_fn(t) * periodic_laplacian(v, grid.spacing)
        t = k * dt
        if k % store_every == 0 or k == n_steps:
            times.append(t)
            fields.append(Field(grid, v))
    return FieldSeries(np.array(times), fields)


def apriori_functional(traj):
    """The a priori diagnostic: sup_t of mass-moment-entropy plus the
    accumulated dissipation integral.

    Per frame computes sum_i integral a_i (1 + |x| + |ln a_i|) with |x| the
    minimum-image distance from the torus center; the dissipation integral
    accumulates trapezoidally from the step log.
    """
    grid = traj.grid
    dist = periodic_distance(grid, grid.center())
    sup_val = -np.inf
    series = []
    for st in traj.states:
        a = st.values_array()
        with np.errstate(divide="ignore", invalid="ignore"):
            lg = np.where(a > 0, np.abs(np.log(np.maximum(a, SQRT_REG))), 0.0)
        val = grid.cell_volume * float((a * (1.0 + dist + lg)).sum())
        series.append(val)
        sup_val = max(sup_val, val)
    log_t = np.array([r.time for r in traj.step_log])
    log_d = np.array([r.dissipation for r in traj.step_log])
    diss_integral = float(np.trapezoid(log_d, log_t)) if len(log_t) > 1 else 0.0
    return {
        "sup_mass_moment_entropy": sup_val,
        "dissipation_integral": diss_integral,
        "total": sup_val + diss_integral,
        "series": np.array(series),
    }


# ---------------------------------------------------------------------------
# Trajectory directory layout
# ---------------------------------------------------------------------------

DIAGNOSTICS_NAME = "diagnostics.csv"


def save_trajectory(traj, directory):
    """One snapshot file per species and frame, plus diagnostics.csv."""
    os.makedirs(directory, exist_ok=True)
    for k, st in enumerate(traj.states):
        for i, f in enumerate(st.species):
            write_snapshot(
                os.path.join(directory, f"frame{k:05d}_s{i}.bin"), f, st.time
            )
    p = traj.p
    with open(os.path.join(directory, DIAGNOSTICS_NAME), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(
            ["time"] + [f"mass_{i + 1}" for i in range(p)]
            + ["entropy", "dissipation", "min_value", "dt"]
        )
        for r in traj.step_log:
            w.writerow(
                [repr(r.time)] + [repr(m) for m in r.masses]
                + [repr(r.entropy), repr(r.dissipation), repr(r.min_value), repr(r.dt)]
            )


def load_trajectory(directory):
    """Rebuild a Trajectory from a snapshot directory written by save_trajectory."""
    names = sorted(n for n in os.listdir(directory) if n.endswith(".bin"))
    frames = {}
    for name in names:
        stem = name[:-4]
        fk, si = stem.split("_s")
        k = int(fk.replace("frame", ""))
        f, t = read_snapshot(os.path.join(directory, name))
        frames.setdefault(k, {})[int(si)] = (f, t)
    states = []
    for k in sorted(frames):
        by_i = frames[k]
        fields = [by_i[i][0] for i in sorted(by_i)]
        states.append(SpeciesState(by_i[0][1], fields))

    log = []
    path = os.path.join(directory, DIAGNOSTICS_NAME)
    if os.path.exists(path):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = rows[0]
        p = sum(1 for c in header if c.startswith("mass_"))
        for row in rows[1:]:
            vals = [float(x) for x in row]
            log.append(
                StepRecord(
                    time=vals[0],
                    dt=vals[-1],
                    rejects=0,
                    masses=tuple(vals[1:1 + p]),
                    entropy=vals[1 + p],
                    dissipation=vals[2 + p],
                    min_value=vals[3 + p],
                )
            )
    return Trajectory(states, log)
