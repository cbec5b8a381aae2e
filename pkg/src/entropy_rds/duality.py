"""Backward dual problems, the empirical ABPKT constant, and duality norms.

The dual problem lives on its own Cartesian grid over the cube circumscribing
B_2, with homogeneous Dirichlet values frozen outside the ball; it is
deliberately decoupled from the periodic simulation grid.  Substituting
s = -t turns the final-value problem

    du/dt + d Lap u = f,   u(0, x) = 0,   u = 0 on the ball boundary,

posed for t in (-T, 0), into a forward heat problem marched by implicit
Euler (one sparse factorization, time-independent coefficients) or by an
explicit sweep under the usual CFL bound.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from entropy_rds.core import (
    Ball,
    Cylinder,
    FieldSeries,
    cylinder_lp_norm,
    lp_norm,
    sup_oscillation,
)


class ZeroSourceError(ValueError):
    """The ABP ratio is undefined for an identically zero source."""


@dataclass(frozen=True)
class CubeGrid:
    """Nodes of a uniform non-periodic lattice on [-half, half]^N."""

    dim: int
    n: int
    half: float = 2.0

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("need at least 8 nodes per axis")

    @property
    def spacing(self):
        return 2.0 * self.half / (self.n - 1)

    @property
    def shape(self):
        return (self.n,) * self.dim

    def axis_coords(self):
        return np.linspace(-self.half, self.half, self.n)

    def mesh(self):
        axes = [self.axis_coords() for _ in range(self.dim)]
        return np.meshgrid(*axes, indexing="ij")

    def radius_grid(self):
        mesh = self.mesh()
        return np.sqrt(sum(m ** 2 for m in mesh))

    def interior_mask(self, radius=None):
        r = self.half if radius is None else radius
        return self.radius_grid() < r - 1e-12

    def ball_mask(self, radius):
        return self.radius_grid() <= radius + 1e-12

    def cell_volume(self):
        return self.spacing ** self.dim


def cube_laplacian(grid):
    """Sparse centered Laplacian with zero Dirichlet data outside the ball.

    Rows of frozen (exterior) nodes are identically zero, so I - dt*D*L has
    identity rows there and frozen values stay pinned at zero.
    """
    size = int(np.prod(grid.shape))
    flat = np.arange(size).reshape(grid.shape)
    h2 = grid.spacing ** 2
    rows, cols, vals = [], [], []
    for a in range(grid.dim):
        lo = np.moveaxis(flat, a, 0)[:-1].ravel()
        hi = np.moveaxis(flat, a, 0)[1:].ravel()
        ones = np.ones(lo.size) / h2
        rows.append(lo)
        cols.append(hi)
        vals.append(ones)
        rows.append(hi)
        cols.append(lo)
        vals.append(ones)
    rows.append(np.arange(size))
    cols.append(np.arange(size))
    vals.append(np.full(size, -2.0 * grid.dim / h2))
    lap = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(size, size),
    ).tocsr()
    keep = sp.diags(grid.interior_mask().ravel().astype(float))
    return keep @ lap


@dataclass
class DualProblem:
    """Final-value problem data: coefficient field, source, horizon, bounds.

    By default the source is required to vanish outside Q_1 = (-1, 0) x B_1,
    the configuration the duality estimate pairs against; oracle tests with
    eigenfunction sources may disable the check.
    """

    grid: CubeGrid
    d_values: np.ndarray
    source: callable
    horizon: float = 4.0
    d_min: float = 0.5
    d_max: float = 2.0
    enforce_q1_support: bool = True

    def __post_init__(self):
        self.d_values = np.asarray(self.d_values, dtype=float)
        if self.d_values.shape != self.grid.shape:
            raise ValueError("coefficient field shape mismatch")
        if not self.enforce_q1_support:
            return
        inner = self.grid.ball_mask(1.0)
        for t in (-self.horizon + 1e-6, -1.5, -1.0 - 1e-9):
            if np.any(self.source(t) != 0.0):
                raise ValueError(f"source must vanish at t = {t:g} (outside Q_1)")
        probe = self.source(-0.5)
        if np.any(probe[~inner] != 0.0):
            raise ValueError("source must vanish outside B_1")

    def check_bounds(self):
        if self.d_values.min() < self.d_min - 1e-12 or \
           self.d_values.max() > self.d_max + 1e-12:
            raise ValueError(
                f"coefficient field leaves [{self.d_min}, {self.d_max}]: "
                f"range [{self.d_values.min():g}, {self.d_values.max():g}]"
            )


@dataclass
class DualSolution:
    grid: CubeGrid
    times: np.ndarray
    u: np.ndarray
    f: np.ndarray

    def sup_abs(self):
        return float(np.abs(self.u).max())

    def source_norm(self, p):
        dens = self.grid.cell_volume() * np.sum(
            np.abs(self.f.reshape(len(self.times), -1)) ** p, axis=1
        )
        return float(np.trapezoid(dens, self.times)) ** (1.0 / p)


def solve_dual_final(prob, dt=0.01, scheme="implicit"):
    """March the backward problem; returns the solution on (-horizon, 0).

    u(0, x) = 0 exactly and u vanishes on and outside the ball boundary at
    every time by construction.
    """
    prob.check_bounds()
    grid = prob.grid
    interior = grid.interior_mask().ravel()
    lap = cube_laplacian(grid)
    size = lap.shape[0]
    d_flat = prob.d_values.ravel() * interior

    n_steps = max(1, int(round(prob.horizon / dt)))
    dt = prob.horizon / n_steps

    if scheme == "explicit":
        bound = grid.spacing ** 2 / (2.0 * grid.dim * prob.d_max)
        if dt > bound * (1 + 1e-12):
            raise ValueError(f"explicit dt {dt:g} exceeds stability bound {bound:g}")
        solver = None
    elif scheme == "implicit":
        a_mat = sp.eye(size) - dt * sp.diags(d_flat) @ lap
        solver = splu(a_mat.tocsc())
    else:
        raise ValueError(f"unknown scheme {scheme!r}")

    v = np.zeros(size)
    u_frames = [v.copy()]
    f_frames = [prob.source(0.0).ravel().copy()]
    times = [0.0]
    for k in range(1, n_steps + 1):
        t = -k * dt
        f_flat = prob.source(t).ravel()
        if scheme == "implicit":
            rhs = (v - dt * f_flat) * interior
            v = solver.solve(rhs)
        else:
            v = v + dt * (d_flat * lap.dot(v) - f_flat)
        v = v * interior
        times.append(t)
        u_frames.append(v.copy())
        f_frames.append(f_flat.copy())

    order = np.argsort(times)
    t_arr = np.array(times)[order]
    u = np.array(u_frames)[order].reshape((n_steps + 1,) + grid.shape)
    f = np.array(f_frames)[order].reshape((n_steps + 1,) + grid.shape)
    return DualSolution(grid, t_arr, u, f)


def abp_ratio(sol, f=None):
    """sup |u| over the cylinder divided by the L^(N+1) norm of the source."""
    n_dim = sol.grid.dim
    fnorm = sol.source_norm(n_dim + 1) if f is None else f
    if fnorm == 0.0:
        raise ZeroSourceError("ABP ratio undefined for f = 0")
    return sol.sup_abs() / fnorm


def random_dual_problem(grid, rng, d_min=0.5, d_max=2.0, horizon=4.0):
    """Seeded random coefficient field and Q_1-supported source."""
    mesh = grid.mesh()
    vals = np.zeros(grid.shape)
    for _ in range(3):
        k = rng.uniform(0.5, 2.0, size=grid.dim)
        phase = rng.uniform(0, 2 * np.pi, size=grid.dim)
        term = np.ones(grid.shape)
        for a in range(grid.dim):
            term = term * np.sin(k[a] * mesh[a] + phase[a])
        vals += rng.uniform(0.3, 1.0) * term
    lo, hi = vals.min(), vals.max()
    d_field = d_min + (d_max - d_min) * (vals - lo) / max(hi - lo, 1e-30)

    r = grid.radius_grid()
    space = np.where(r < 1.0, np.cos(np.pi * r / 2.0) ** 2, 0.0)
    wiggle = np.ones(grid.shape)
    kv = rng.integers(1, 4, size=grid.dim)
    ph = rng.uniform(0, 2 * np.pi, size=grid.dim)
    for a in range(grid.dim):
        wiggle = wiggle * np.cos(kv[a] * mesh[a] + ph[a])
    amp = rng.uniform(0.5, 2.0) * rng.choice((-1.0, 1.0))
    t_mid = rng.uniform(-0.8, -0.2)
    t_width = rng.uniform(0.05, 0.2)

    def source(t):
        if t <= -1.0 or t >= 0.0:
            return np.zeros(grid.shape)
        bump = np.exp(-((t - t_mid) ** 2) / (2 * t_width ** 2))
        # hard cutoff keeping the support strictly inside (-1, 0)
        bump *= np.sin(np.pi * (-t)) ** 2
        return amp * bump * space * wiggle

    return DualProblem(grid, d_field, source, horizon, d_min, d_max)


# ---------------------------------------------------------------------------
# Duality norms on trajectories
# ---------------------------------------------------------------------------

@dataclass
class FabesCheck:
    lhs: float
    rhs_factor: float
    ratio: float


def fabes_duality_check(traj, center=None):
    """L^((N+1)/N) cylinder norm of the mass against its sup-in-time L^1.

    lhs is over Q_1, the right factor is sup over t in (-4, 0) of the B_2
    mass; the ratio is the empirical duality constant.
    """
    if isinstance(traj, FieldSeries):
        mass = traj
    else:
        mass = traj.mass_series()
    grid = mass.grid
    if center is None:
        center = (float(mass.times[-1]), grid.center())
    t_c, x_c = center
    n_dim = grid.dim
    p = (n_dim + 1) / n_dim
    lhs = cylinder_lp_norm(mass, Cylinder(1.0, x_c, t_c), p=p)

    times = mass.times
    tol = 1e-9 * max(1.0, abs(t_c))
    lo = t_c - 4.0
    if times[0] > lo + tol or times[-1] < t_c - tol:
        from entropy_rds.core import CoverageError

        raise CoverageError(
            f"mass frames do not cover the window [{lo:g}, {t_c:g}]"
        )
    sel = np.where((times >= lo - tol) & (times <= t_c + tol))[0]
    rhs = max(lp_norm(mass.fields[k], Ball(x_c, 2.0), p=1.0) for k in sel)

    if rhs == 0.0:
        if lhs > 1e-14:
            raise RuntimeError(
                "sup-in-time L^1 mass vanished while the cylinder norm did not; "
                "this is impossible for nonnegative mass and indicates a norm bug"
            )
        return FabesCheck(lhs, rhs, 0.0)
    return FabesCheck(lhs, rhs, lhs / rhs)


def oscillation_decay(phi_series, cyl_outer=None, cyl_inner=None, center=None):
    """Ratio osc(Phi, Q_1/2) / osc(Phi, Q_2); 0 for constant solutions."""
    if cyl_outer is None or cyl_inner is None:
        grid = phi_series.grid
        t_c = float(phi_series.times[-1]) if center is None else center[0]
        x_c = grid.center() if center is None else center[1]
        cyl_outer = Cylinder(2.0, x_c, t_c)
        cyl_inner = Cylinder(0.5, x_c, t_c)
    osc_outer = sup_oscillation(phi_series, cyl_outer)
    if osc_outer == 0.0:
        return 0.0
    return sup_oscillation(phi_series, cyl_inner) / osc_outer
