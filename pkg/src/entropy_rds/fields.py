"""Seeded constructors for initial data and synthetic coefficient fields."""

from __future__ import annotations

import numpy as np

from entropy_rds.core import Field, SpeciesState, periodic_distance


def gaussian(grid, center=None, width=0.5, amplitude=1.0, floor=0.0):
    """Isotropic Gaussian bump, periodically wrapped."""
    if center is None:
        center = grid.center()
    r = periodic_distance(grid, center)
    return Field(grid, amplitude * np.exp(-(r ** 2) / (2.0 * width ** 2)) + floor)


def random_bumps(grid, rng, n_bumps=3, spread=None, width=0.4, amplitude=1.0,
                 floor=0.0):
    """Sum of Gaussian bumps with seeded centers near the torus center.

    Centers stay within `spread` of the center (default L/8) so the data is
    numerically compact and wrap effects stay negligible.
    """
    if spread is None:
        spread = grid.length / 8.0
    c0 = np.array(grid.center())
    vals = np.full(grid.shape, float(floor))
    for _ in range(n_bumps):
        c = c0 + rng.uniform(-spread, spread, size=grid.dim)
        w = width * rng.uniform(0.7, 1.3)
        amp = amplitude * rng.uniform(0.5, 1.0)
        r = periodic_distance(grid, tuple(c))
        vals += amp * np.exp(-(r ** 2) / (2.0 * w ** 2))
    return Field(grid, vals)


def random_species_state(grid, p, rng, amplitude=1.0, width=0.4, floor=0.0,
                         time=0.0):
    """Nonnegative random initial data: independent bump sums per species."""
    return SpeciesState(
        time,
        [random_bumps(grid, rng, n_bumps=2, width=width, amplitude=amplitude,
                      floor=floor) for _ in range(p)],
    )


def uniform_state(grid, values, time=0.0):
    """Spatially constant state, one value per species."""
    return SpeciesState(time, [Field.constant(grid, v) for v in values])


def random_smooth_field(grid, rng, modes=3, lo=0.0, hi=1.0):
    """Band-limited random field affinely squashed into [lo, hi]."""
    axes = [grid.axis_coords() for _ in range(grid.dim)]
    mesh = np.meshgrid(*axes, indexing="ij")
    vals = np.zeros(grid.shape)
    tau = 2.0 * np.pi / grid.length
    for _ in range(modes):
        kvec = rng.integers(1, 4, size=grid.dim)
        phase = rng.uniform(0, 2 * np.pi, size=grid.dim)
        amp = rng.uniform(0.3, 1.0)
        term = np.ones(grid.shape)
        for a in range(grid.dim):
            term = term * np.sin(tau * kvec[a] * mesh[a] + phase[a])
        vals += amp * term
    vmin, vmax = vals.min(), vals.max()
    if vmax - vmin < 1e-30:
        return Field(grid, np.full(grid.shape, 0.5 * (lo + hi)))
    unit = (vals - vmin) / (vmax - vmin)
    return Field(grid, lo + (hi - lo) * unit)


def random_coefficient_fn(grid, rng, lo, hi, t_period=1.0, modes=3):
    """Seeded time-dependent coefficient d(t, x) in [lo, hi].

    Interpolates smoothly (cosine in time) between two random smooth fields;
    returns a callable t -> array.
    """
    f0 = random_smooth_field(grid, rng, modes, lo, hi).values
    f1 = random_smooth_field(grid, rng, modes, lo, hi).values

    def d_of_t(t):
        w = 0.5 * (1.0 - np.cos(2.0 * np.pi * t / t_period))
        return (1.0 - w) * f0 + w * f1

    return d_of_t
