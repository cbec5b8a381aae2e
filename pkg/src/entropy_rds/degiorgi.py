"""Level-set energies, the geometric recursion, and the smallness test.

The boundedness argument iterates truncation levels k_j = 1 - 2^-j over
shrinking space-time windows of radius t_j = 1/4 + 2^-(j+2).  Each level
carries an energy: the sup-in-time integral of the entropy-like density
H(a - k_j) plus the space-time Dirichlet integral of sqrt(1 + [a - k_j]_+).
The energies obey a supergeometric recursion u_j <= Lam^j u_(j-1)^gamma,
and the elementary lemma for that recursion collapses the ladder to zero
whenever the starting energy is below an explicit threshold
kappa = Lam^(-F(gamma)), F(gamma) = (1/gamma) (1/(1 - 1/gamma))^2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from entropy_rds.core import (
    Ball,
    CoverageError,
    ball_mask,
    gradient_sq,
)

LOG_FLOAT_MAX = float(np.log(np.finfo(np.float64).max))


def entropy_h(z):
    """H(z) = (1+z) ln(1+z) - z for z >= 0, and 0 for z <= 0.

    Nonnegative, nondecreasing, convex, C^1.
    """
    z = np.asarray(z, dtype=float)
    zp = np.maximum(z, 0.0)
    out = (1.0 + zp) * np.log1p(zp) - zp
    return out if out.ndim else float(out)


def psi(z):
    """Psi(z) = sqrt(1 + z) - 1 (z >= -1)."""
    z = np.asarray(z, dtype=float)
    out = np.sqrt(1.0 + z) - 1.0
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class LevelSequence:
    """Truncation levels k_j = 1 - 2^-j and window radii t_j = 1/4 + 2^-(j+2)."""

    j_max: int

    def __post_init__(self):
        if self.j_max < 0:
            raise ValueError("j_max must be nonnegative")

    @property
    def k(self):
        j = np.arange(self.j_max + 1)
        return 1.0 - 2.0 ** (-j.astype(float))

    @property
    def t(self):
        j = np.arange(self.j_max + 1)
        return 0.25 + 2.0 ** (-(j.astype(float) + 2.0))


MIN_FRAMES_PER_UNIT = 32


def level_set_energy(traj, j, eta=None, species=None, center=None,
                     levels=None):
    """The level-j energy over the shrinking window (-t_j, 0) x B_(t_j).

    sup over stored frames of sum_i int H(a_i - eta) over the ball, plus the
    trapezoidal space-time integral of sum_i |grad sqrt(1 + [a_i - eta]_+)|^2.
    eta defaults to the truncation level k_j.  Gradients use forward
    differences, one-sided at truncation kinks by construction.
    """
    if levels is None:
        levels = LevelSequence(max(j, 0))
    k_j = levels.k[j]
    t_j = levels.t[j]
    if eta is None:
        eta = k_j
    grid = traj.grid
    if center is None:
        center = (float(traj.times[-1]), grid.center())
    t_c, x_c = center
    times = traj.times
    lo, hi = t_c - t_j, t_c
    tol = 1e-9 * max(1.0, abs(t_c))
    if times[0] > lo + tol or times[-1] < hi - tol:
        raise CoverageError(
            f"window [{lo:g}, {hi:g}] not covered by frames "
            f"[{times[0]:g}, {times[-1]:g}]"
        )
    sel = np.where((times >= lo - tol) & (times <= hi + tol))[0]
    if len(sel) >= 2:
        cadence = (times[sel[-1]] - times[sel[0]]) / (len(sel) - 1)
        if cadence > 1.0 / MIN_FRAMES_PER_UNIT + 1e-12:
            raise CoverageError(
                f"frame cadence {cadence:g} too coarse inside the cylinder; "
                f"need at least {MIN_FRAMES_PER_UNIT} frames per unit time"
            )
    mask = ball_mask(grid, Ball(x_c, t_j))
    hv = grid.cell_volume
    sp_list = range(traj.p) if species is None else [species]

    sup_h = 0.0
    diri = []
    for k in sel:
        a = traj.states[k].values_array()
        h_int = 0.0
        g_int = 0.0
        for i in sp_list:
            trunc = np.maximum(a[i] - eta, 0.0)
            h_int += hv * float(entropy_h(a[i] - eta)[mask].sum())
            g = np.sqrt(1.0 + trunc)
            g_int += hv * float(gradient_sq(g, grid.spacing, mask).sum())
        sup_h = max(sup_h, h_int)
        diri.append(g_int)
    grad_term = float(np.trapezoid(diri, times[sel])) if len(sel) > 1 else 0.0
    return sup_h + grad_term


@dataclass
class EnergyLadder:
    levels: LevelSequence
    values: np.ndarray
    lambda_fit: float = None
    exponent_fit: float = None


def compute_ladder(traj, j_max=10, center=None, species=None):
    """Evaluate the whole energy ladder u_0..u_jmax at eta = k_j."""
    levels = LevelSequence(j_max)
    vals = np.array([
        level_set_energy(traj, j, center=center, species=species, levels=levels)
        for j in range(j_max + 1)
    ])
    return EnergyLadder(levels, vals)


# ---------------------------------------------------------------------------
# The geometric recursion
# ---------------------------------------------------------------------------

def recursion_threshold_fexp(gamma):
    """F(gamma) = (1/gamma) * (1 / (1 - 1/gamma))^2 of the smallness lemma."""
    if gamma <= 1:
        raise ValueError("gamma must exceed 1")
    return (1.0 / gamma) * (1.0 / (1.0 - 1.0 / gamma)) ** 2


@dataclass
class RecursionResult:
    sequence: np.ndarray
    log_sequence: np.ndarray
    kappa: float
    f_gamma: float
    verdict: str
    overflow_index: int = None


def recursion_simulate(u0, lam, gamma, n=60):
    """Iterate the equality orbit u_k = Lam^k u_(k-1)^gamma in log space.

    Also returns the threshold kappa = Lam^(-F(gamma)) and a convergence
    verdict; orbits that would overflow float64 are flagged with the first
    overflowing index.
    """
    if lam <= 1 or gamma <= 1:
        raise ValueError("need Lam > 1 and gamma > 1")
    if u0 < 0:
        raise ValueError("u0 must be nonnegative")
    f_gamma = recursion_threshold_fexp(gamma)
    kappa = lam ** (-f_gamma)

    logs = np.empty(n + 1)
    logs[0] = -np.inf if u0 == 0.0 else np.log(u0)
    for k in range(1, n + 1):
        logs[k] = k * np.log(lam) + gamma * logs[k - 1]

    overflow = np.where(logs > LOG_FLOAT_MAX)[0]
    overflow_index = int(overflow[0]) if overflow.size else None
    with np.errstate(over="ignore"):
        seq = np.exp(logs)

    if overflow_index is not None:
        verdict = "diverged"
    elif logs[-1] < min(logs[0], -50.0) and logs[-1] <= logs[-2]:
        verdict = "converged"
    elif logs[-1] > max(logs[0], 50.0):
        verdict = "diverged"
    else:
        verdict = "undecided"
    return RecursionResult(seq, logs, kappa, f_gamma, verdict, overflow_index)


# ---------------------------------------------------------------------------
# Ladder fitting
# ---------------------------------------------------------------------------

@dataclass
class LadderFit:
    lambda_fit: float
    exponent_fit: float
    predicted_limit: float
    verdict: str
    theta: float
    favored_exponent: str


def gagliardo_nirenberg_theta(n_dim):
    """Interpolation weight theta = (N - 2)/N of the space-time embedding."""
    return (n_dim - 2) / n_dim


def ladder_fit(ladder, n_dim):
    """Least-squares fit of log u_j = j log(Lam) + gamma log u_(j-1).

    Requires at least 4 consecutive positive entries.  The verdict states
    whether the ladder is compatible with collapse to zero under the fitted
    recursion; the fit also reports which of the two candidate exponents
    (1 + N/2 from the energy estimate, 1 + 2/N from the interpolation route)
    it favors.
    """
    vals = np.asarray(ladder.values, dtype=float)
    theta = gagliardo_nirenberg_theta(n_dim)
    if np.all(vals == 0.0):
        return LadderFit(float("nan"), float("nan"), 0.0, "converged", theta, "n/a")
    usable = np.where((vals[1:] > 0) & (vals[:-1] > 0))[0] + 1
    if usable.size < 4:
        raise ValueError(
            f"need at least 4 positive consecutive ladder entries, have {usable.size}"
        )
    j = usable.astype(float)
    y = np.log(vals[usable])
    x_prev = np.log(vals[usable - 1])
    design = np.column_stack([j, x_prev])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    log_lam, gamma = float(coef[0]), float(coef[1])
    lam_fit = float(np.exp(log_lam))

    cand = {"1+N/2": 1.0 + n_dim / 2.0, "1+2/N": 1.0 + 2.0 / n_dim}
    favored = min(cand, key=lambda k: abs(cand[k] - gamma))

    if gamma > 1.0 and lam_fit > 1.0:
        kappa = lam_fit ** (-recursion_threshold_fexp(gamma))
        converging = vals[usable[0] - 1] <= kappa or vals[usable][-1] < vals[usable][0]
        verdict = "converged" if converging else "diverged"
        limit = 0.0 if converging else float("inf")
    elif gamma > 1.0:
        verdict = "converged"
        limit = 0.0
    else:
        verdict = "not-contractive"
        limit = float("nan")
    ladder.lambda_fit = lam_fit
    ladder.exponent_fit = gamma
    return LadderFit(lam_fit, gamma, limit, verdict, theta, favored)


# ---------------------------------------------------------------------------
# Smallness implies boundedness (empirical form)
# ---------------------------------------------------------------------------

@dataclass
class SmallnessReport:
    lr_norm_sum: float
    r_exponent: float
    ladder: EnergyLadder
    ladder_final: float
    center_values: tuple
    center_max: float
    center_bounded: bool


def smallness_boundedness_test(traj, r=None, center=None, j_max=10):
    """Empirical version of the local smallness criterion.

    Computes sum_i ||a_i||_{L^r} over (-1,0) x B_1, the full energy ladder,
    and the center value a(0, 0); r defaults to (N+1)/N.  The association
    tested is: small local norm goes with a collapsing ladder and a center
    value at most 1.  No claim is made about the universal threshold itself.
    """
    from entropy_rds.core import Cylinder, cylinder_lp_norm

    grid = traj.grid
    if center is None:
        center = (float(traj.times[-1]), grid.center())
    t_c, x_c = center
    if r is None:
        r = (grid.dim + 1) / grid.dim
    cyl = Cylinder(1.0, x_c, t_c)
    norm_sum = sum(
        cylinder_lp_norm(traj, cyl, species_index=i, p=r) for i in range(traj.p)
    )
    ladder = compute_ladder(traj, j_max=j_max, center=center)
    anchor = traj.state_at(t_c)
    idx = grid.nearest_index(x_c)
    center_values = tuple(float(f.values[idx]) for f in anchor.species)
    center_max = max(center_values)
    return SmallnessReport(
        lr_norm_sum=norm_sum,
        r_exponent=r,
        ladder=ladder,
        ladder_final=float(ladder.values[-1]),
        center_values=center_values,
        center_max=center_max,
        center_bounded=center_max <= 1.0 + 1e-12,
    )
