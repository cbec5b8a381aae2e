"""Total mass, the effective coefficient, the potential, and weak-norm scans.

The total mass M = sum_i a_i solves the nonconservative diffusion equation
dM/dt = Lap(d M) with the mass-weighted coefficient d trapped between the
extreme species coefficients.  The potential Phi = Lap^{-1} M carries the
weak norms: its sup norm obeys an N-dependent two-norm bound with an
explicit constant obtained by a radius optimization, and its Holder seminorm
is what shrinks rescaled masses.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft
from scipy.optimize import minimize_scalar

from entropy_rds.core import (
    Ball,
    Field,
    FieldSeries,
    ball_mask,
    lp_norm,
    periodic_distance,
)


def total_mass(state):
    """Pointwise sum of the species fields."""
    return Field(state.grid, np.sum(state.values_array(), axis=0))


def effective_diffusion(state, coeffs, mu=0.0):
    """Mass-weighted coefficient d = sum d_i a_i / sum a_i, mollified.

    Where M >= mu the exact ratio is used; below mu/2 the midpoint
    (d_min + d_max)/2; in between a smooth cubic ramp blends the two, so the
    output is smooth, equals d where mass is present, and stays inside
    [d_min, d_max] everywhere.
    """
    if mu < 0:
        raise ValueError("mu must be nonnegative")
    a = state.values_array()
    m = np.sum(a, axis=0)
    num = np.tensordot(np.asarray(coeffs.d), a, axes=(0, 0))
    mid = 0.5 * (coeffs.d_min + coeffs.d_max)
    safe = np.maximum(m, 1e-300)
    raw = np.where(m > 0, num / safe, mid)
    if mu == 0:
        d = raw
    else:
        t = np.clip((m - mu / 2.0) / (mu / 2.0), 0.0, 1.0)
        w = t * t * (3.0 - 2.0 * t)
        d = w * raw + (1.0 - w) * mid
    return Field(state.grid, np.clip(d, coeffs.d_min, coeffs.d_max))


# ---------------------------------------------------------------------------
# Poisson potential
# ---------------------------------------------------------------------------

@dataclass
class PotentialField:
    phi: Field
    backend: str
    mean_note: float


def _stencil_symbol(grid):
    """Fourier symbol of the centered 5/7-point Laplacian (rfftn layout)."""
    sym = None
    for a in range(grid.dim):
        if a < grid.dim - 1:
            f = sfft.fftfreq(grid.n)
        else:
            f = sfft.rfftfreq(grid.n)
        s = (2.0 * np.cos(2.0 * np.pi * f) - 2.0) / grid.spacing ** 2
        shape = [1] * grid.dim
        shape[a] = len(f)
        s = s.reshape(shape)
        sym = s if sym is None else sym + s
    return sym


@lru_cache(maxsize=1)
def unit_cube_kernel_average():
    """Average of 1/|y| over the unit cube, via the divergence identity.

    div(y/|y|) = 2/|y| in 3D turns the singular volume integral into a
    smooth face integral: int_cube 1/|y| dy = (3/2) int_face 1/|y| dS over
    the face y1 = 1/2.  Simpson quadrature on the face is accurate to ~1e-9.
    """
    m = 257
    u = np.linspace(-0.5, 0.5, m)
    du = u[1] - u[0]
    y2, y3 = np.meshgrid(u, u, indexing="ij")
    vals = 1.0 / np.sqrt(0.25 + y2 ** 2 + y3 ** 2)
    w = np.ones(m)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= du / 3.0
    face = float(w @ vals @ w)
    return 1.5 * face


def _free_space_kernel(grid):
    """Riesz kernel -1/(4 pi |r|) on the 2x zero-padded lattice (N = 3)."""
    n2 = 2 * grid.n
    h = grid.spacing
    idx = np.arange(n2)
    r1 = h * np.where(idx <= grid.n, idx, idx - n2).astype(float)
    rx, ry, rz = np.meshgrid(r1, r1, r1, indexing="ij")
    r = np.sqrt(rx ** 2 + ry ** 2 + rz ** 2)
    with np.errstate(divide="ignore"):
        k = -1.0 / (4.0 * np.pi * r)
    # singular cell: analytic average of 1/|y| over the h-cube
    k[0, 0, 0] = -unit_cube_kernel_average() / (4.0 * np.pi * h)
    return k


def poisson_potential(m_field, backend="periodic-spectral", workers=1):
    """Solve for the potential Phi with Lap Phi = M.

    periodic-spectral: inverts the centered-stencil symbol, so the discrete
    Laplacian of the output reproduces M - mean(M) to roundoff; the
    subtracted mean is recorded in mean_note.

    free-space-kernel (N = 3 only): embeds the field in a 2x zero-padded box
    and convolves with the truncated Riesz kernel -C_3/|r|, C_3 = 1/(4 pi);
    the singular cell uses the analytic cube average.  Solves Lap Phi = M
    with decay at infinity, up to O(h^2) kernel discretization.
    """
    grid = m_field.grid
    if backend == "periodic-spectral":
        mhat = sfft.rfftn(m_field.values, workers=workers)
        sym = _stencil_symbol(grid)
        mean = float(m_field.values.mean())
        with np.errstate(divide="ignore", invalid="ignore"):
            phat = np.where(sym != 0, mhat / np.where(sym != 0, sym, 1.0), 0.0)
        phi = sfft.irfftn(phat, s=grid.shape, workers=workers)
        return PotentialField(Field(grid, phi), backend, mean)
    if backend == "free-space-kernel":
        if grid.dim < 3:
            raise ValueError("free-space kernel backend needs N >= 3")
        pad_shape = tuple(2 * grid.n for _ in range(grid.dim))
        mp = np.zeros(pad_shape)
        mp[tuple(slice(0, grid.n) for _ in range(grid.dim))] = m_field.values
        kern = _free_space_kernel(grid)
        phi_hat = sfft.rfftn(mp, workers=workers) * sfft.rfftn(kern, workers=workers)
        phi = sfft.irfftn(phi_hat, s=pad_shape, workers=workers)
        phi = phi[tuple(slice(0, grid.n) for _ in range(grid.dim))] * grid.cell_volume
        return PotentialField(Field(grid, phi), backend, 0.0)
    raise ValueError(f"unknown backend {backend!r}")


def sphere_area(n_dim):
    """Surface measure of the unit sphere in R^N."""
    from math import gamma, pi

    return 2.0 * pi ** (n_dim / 2.0) / gamma(n_dim / 2.0)


def kernel_constant(n_dim):
    """C_N = 1 / ((N - 2) sigma_N) of the Newtonian kernel, N >= 3."""
    if n_dim < 3:
        raise ValueError("Newtonian kernel constant needs N >= 3")
    return 1.0 / ((n_dim - 2) * sphere_area(n_dim))


@dataclass
class PotentialBound:
    lhs: float
    rhs: float
    constant: float
    radius_opt: float


def optimal_kernel_split_constant(n_dim):
    """K_N from minimizing the near/far kernel split over the split radius.

    The bound |Phi| <= C_N sigma_N R^2/2 * sup M + C_N R^(2-N) * ||M||_1 is
    minimized in R > 0 numerically; K_N is the minimum for unit norms.
    Returns (K_N, optimal R).
    """
    c_n = kernel_constant(n_dim)
    s_n = sphere_area(n_dim)

    def bound(log_r):
        r = np.exp(log_r)
        return c_n * s_n * r ** 2 / 2.0 + c_n * r ** (2.0 - n_dim)

    res = minimize_scalar(bound, bounds=(-20.0, 20.0), method="bounded",
                          options={"xatol": 1e-12})
    return float(res.fun), float(np.exp(res.x))


def potential_linfty_bound(m0):
    """Evaluate both sides of the sup-norm potential bound.

    lhs = ||Phi||_inf from the free-space solve; rhs = K_N * (sup M)^(1-2/N)
    * (||M||_1)^(2/N) with K_N from the explicit radius optimization.
    """
    if m0.min() < 0:
        raise ValueError("potential bound requires a nonnegative field")
    n_dim = m0.grid.dim
    if n_dim < 3:
        raise ValueError("potential bound needs N >= 3")
    k_n, r_opt = optimal_kernel_split_constant(n_dim)
    a = m0.max()
    b = m0.integral()
    if a == 0.0:
        return PotentialBound(0.0, 0.0, k_n, r_opt)
    phi = poisson_potential(m0, backend="free-space-kernel").phi
    lhs = float(np.abs(phi.values).max())
    rhs = k_n * a ** (1.0 - 2.0 / n_dim) * b ** (2.0 / n_dim)
    return PotentialBound(lhs, rhs, k_n, r_opt)


# ---------------------------------------------------------------------------
# Holder quotient
# ---------------------------------------------------------------------------

@dataclass
class HolderEstimate:
    alpha: float
    constant: float
    sample_count: int
    alphas: np.ndarray = None
    constants: np.ndarray = None


def holder_quotient(phi_series, t0=None, pair_budget=4096, seed=0,
                    alpha_grid=None):
    """Feasibility sweep for the parabolic Holder exponent of a field series.

    Samples random space-time pairs and, for each candidate alpha, computes
    the worst quotient |Phi(t+tau, x+h) - Phi(t, x)| normalized by
    (|tau|^(alpha/2) + |h|^alpha) ||Phi||_inf.  Reports the largest alpha
    whose constant stays below 10x the alpha = 0 baseline.
    """
    if pair_budget < 1000:
        raise ValueError("pair budget must be at least 10^3")
    times = phi_series.times
    if t0 is None:
        t0 = float(times[0])
    eligible = np.where(times >= t0 - 1e-12)[0]
    if eligible.size < 2:
        raise ValueError("need at least two frames at or after t0")
    grid = phi_series.grid
    rng = np.random.default_rng(seed)

    sup = phi_series.sup_norm()
    if alpha_grid is None:
        alpha_grid = np.round(np.arange(0.05, 1.0001, 0.05), 10)

    i1 = rng.choice(eligible, size=pair_budget)
    i2 = rng.choice(eligible, size=pair_budget)
    flat1 = rng.integers(0, grid.n ** grid.dim, size=pair_budget)
    flat2 = rng.integers(0, grid.n ** grid.dim, size=pair_budget)

    coords = grid.axis_coords()
    idx1 = np.array(np.unravel_index(flat1, grid.shape))
    idx2 = np.array(np.unravel_index(flat2, grid.shape))
    delta = np.abs(coords[idx1] - coords[idx2])
    delta = np.minimum(delta, grid.length - delta)
    dist = np.sqrt(np.sum(delta ** 2, axis=0))
    tau = np.abs(times[i1] - times[i2])

    stack = {k: phi_series.fields[k].values.ravel() for k in np.unique(np.concatenate([i1, i2]))}
    v1 = np.array([stack[k][f] for k, f in zip(i1, flat1)])
    v2 = np.array([stack[k][f] for k, f in zip(i2, flat2)])
    dphi = np.abs(v1 - v2)

    keep = (tau > 0) | (dist > 0)
    tau, dist, dphi = tau[keep], dist[keep], dphi[keep]

    if sup == 0.0 or dphi.max() == 0.0:
        return HolderEstimate(1.0, 0.0, int(keep.sum()),
                              np.asarray(alpha_grid), np.zeros(len(alpha_grid)))

    base = float(np.max(dphi / 2.0)) / sup  # alpha = 0 baseline
    constants = np.array([
        float(np.max(dphi / (tau ** (al / 2.0) + dist ** al))) / sup
        for al in alpha_grid
    ])
    feasible = constants <= 10.0 * base + 1e-15
    if feasible.any():
        j = int(np.where(feasible)[0].max())
    else:
        j = 0
    return HolderEstimate(float(alpha_grid[j]), float(constants[j]),
                          int(keep.sum()), np.asarray(alpha_grid), constants)


# ---------------------------------------------------------------------------
# Weak-norm shrinking scan
# ---------------------------------------------------------------------------

@dataclass
class WeakNormScan:
    eps: np.ndarray
    sup_mass: np.ndarray
    slope: float
    q: float


def rescaled_ball_mass(traj_mass, center, eps, q, ball_radius=2.0):
    """sup over s in (-4, 0) of the rescaled mass integral over B_radius.

    Change of variables maps the integral back to the source grid:
    int_{B_r} M^(eps)(s, y) dy = eps^(2/(q-1) - N) int_{B_(r eps)(x)} M dx,
    so no resampling is needed.
    """
    t_c, x_c = center
    grid = traj_mass.grid
    times = traj_mass.times
    lo, hi = t_c - 4.0 * eps ** 2, t_c
    tol = 1e-9 * max(1.0, abs(t_c))
    if times[0] > lo + tol or times[-1] < hi - tol:
        from entropy_rds.core import CoverageError

        raise CoverageError(
            f"window [{lo:g}, {hi:g}] not covered by frames "
            f"[{times[0]:g}, {times[-1]:g}]"
        )
    mask = ball_mask(grid, Ball(x_c, ball_radius * eps))
    pref = eps ** (2.0 / (q - 1.0) - grid.dim)
    sel = np.where((times >= lo - tol) & (times <= hi + tol))[0]
    best = 0.0
    for k in sel:
        best = max(best, grid.cell_volume * float(traj_mass.fields[k].values[mask].sum()))
    return pref * best


def weak_norm_scan(traj, center, eps_list, q):
    """Table of (eps, sup_s int_{B_2} M^(eps)) plus its log-log slope."""
    if isinstance(traj, FieldSeries):
        mass = traj
    else:
        mass = traj.mass_series()
    grid = mass.grid
    eps_arr = np.asarray(sorted(eps_list, reverse=True), dtype=float)
    if 2.0 * eps_arr.max() > grid.length / 2.0:
        raise ValueError("largest rescaled ball exceeds half the box")
    sups = np.array([
        rescaled_ball_mass(mass, center, e, q) for e in eps_arr
    ])
    pos = sups > 0
    if pos.sum() >= 2:
        slope = float(np.polyfit(np.log(eps_arr[pos]), np.log(sups[pos]), 1)[0])
    else:
        slope = float("nan")
    return WeakNormScan(eps_arr, sups, slope, q)


def shrinking_exponent(alpha, q):
    """The scaling exponent alpha - 2 + 2/(q-1) of the weak-norm bound."""
    return alpha - 2.0 + 2.0 / (q - 1.0)


def critical_growth(alpha):
    """The growth threshold q = 2 + alpha/(2 - alpha) where shrinking stops."""
    return 2.0 + alpha / (2.0 - alpha)


# ---------------------------------------------------------------------------
# Mass-equation residual
# ---------------------------------------------------------------------------

def mass_equation_residual(traj, coeffs, t, mu=0.0):
    """Discrete residual of dM/dt = Lap(d M) at an interior frame time."""
    from entropy_rds.core import periodic_laplacian

    times = traj.times
    j = int(np.argmin(np.abs(times - t)))
    if j == 0 or j == len(times) - 1:
        raise ValueError("t must be interior to the trajectory")
    grid = traj.grid
    m_prev = total_mass(traj.states[j - 1]).values
    m_next = total_mass(traj.states[j + 1]).values
    m_mid = total_mass(traj.states[j])
    d_mid = effective_diffusion(traj.states[j], coeffs, mu)
    res = (m_next - m_prev) / (times[j + 1] - times[j - 1]) \
        - periodic_laplacian(d_mid.values * m_mid.values, grid.spacing)
    return Field(grid, res)
