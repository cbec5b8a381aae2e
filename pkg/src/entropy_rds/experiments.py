"""Orchestration: build a run from a config, execute analyses, write artifacts.

Artifact layout under the output directory:

    trajectory/          snapshot files + diagnostics.csv
    <analysis>.csv       one delimited table per requested analysis
    summary.json         machine-readable pass/fail per invariant + values

All randomness flows from the single seed recorded in the summary; rerunning
an identical config reproduces every CSV byte for byte on one platform.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from entropy_rds import core, degiorgi, duality, dynamics, fields, kinetics, mass_analysis
from entropy_rds.config import ExperimentConfig

MASS_DRIFT_THRESHOLD = 1e-10
BOUNDARY_MASS_THRESHOLD = 1e-8
ENTROPY_STEP_FACTOR = 10.0


def build_network(cfg):
    if cfg.network_file is not None:
        return kinetics.load_network(cfg.network_file)
    if cfg.network_builtin == "four-species":
        return kinetics.four_species_network()
    if cfg.network_builtin == "pure-diffusion":
        return kinetics.empty_network(p=1)
    raise ValueError(f"unknown builtin network {cfg.network_builtin!r}")


def build_grid(cfg):
    return core.Grid(cfg.dim, cfg.n, cfg.length)


def build_coeffs(cfg, p):
    d = cfg.d if cfg.d is not None else tuple(1.0 for _ in range(p))
    if len(d) != p:
        raise ValueError(f"{len(d)} coefficients for {p} species")
    lo = cfg.d_min if cfg.d_min is not None else min(d)
    hi = cfg.d_max if cfg.d_max is not None else max(d)
    return dynamics.DiffusionCoeffs(tuple(float(x) for x in d), lo, hi)


def build_initial_state(cfg, grid, p, rng):
    amps = cfg.amplitude
    if len(amps) == 1:
        amps = amps * p
    if len(amps) != p:
        raise ValueError(f"{len(amps)} amplitudes for {p} species")
    if cfg.init_kind == "equilibrium":
        return fields.uniform_state(grid, amps)
    if cfg.init_kind == "single-gaussian":
        flds = [fields.gaussian(grid, width=cfg.width, amplitude=amps[0],
                                floor=cfg.floor)]
        flds += [core.Field.constant(grid, cfg.floor) for _ in range(p - 1)]
        return core.SpeciesState(0.0, flds)
    if cfg.init_kind == "gaussian-bumps":
        return fields.random_species_state(
            grid, p, rng, amplitude=max(amps), width=cfg.width, floor=cfg.floor
        )
    raise ValueError(f"unknown init kind {cfg.init_kind!r}")


def build_sim_config(cfg):
    return dynamics.SimConfig(
        dt_init=cfg.dt,
        t_end=cfg.t_end,
        scheme=cfg.scheme,
        negativity_tolerance=cfg.negativity_tolerance,
        max_rejects=cfg.max_rejects,
        output_cadence=cfg.output_cadence,
        diagnostics_stride=cfg.diagnostics_stride,
    )


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([x if isinstance(x, str) else repr(x) for x in row])


def _fmt(x):
    return float(x)


# ---------------------------------------------------------------------------
# Invariant audits from the step log
# ---------------------------------------------------------------------------

def audit_invariants(traj, coeffs):
    log = traj.step_log
    totals = np.array([sum(r.masses) for r in log])
    times = np.array([r.time for r in log])
    t_span = max(times[-1] - times[0], 1e-30)
    drift = float(np.max(np.abs(totals - totals[0])) / max(abs(totals[0]), 1e-300))
    drift_rate = drift / t_span

    min_value = float(min(r.min_value for r in log))

    worst_margin = -np.inf
    for prev, cur in zip(log[:-1], log[1:]):
        dt = cur.time - prev.time
        lhs = (cur.entropy - prev.entropy) / dt + 4.0 * coeffs.d_min * cur.dissipation
        worst_margin = max(worst_margin, lhs - ENTROPY_STEP_FACTOR * dt)

    boundary = max(dynamics.boundary_mass_fraction(s) for s in traj.states)

    def gate(value, threshold, ok):
        return {"value": _fmt(value), "threshold": _fmt(threshold), "pass": bool(ok)}

    tol = 1e-12
    return {
        "mass_drift_per_unit_time": gate(
            drift_rate, MASS_DRIFT_THRESHOLD, drift_rate <= MASS_DRIFT_THRESHOLD
        ),
        "min_value": gate(min_value, -tol, min_value >= -tol),
        "entropy_dissipation_margin": gate(
            worst_margin, 0.0, worst_margin <= 0.0
        ),
        "boundary_mass_fraction": gate(
            boundary, BOUNDARY_MASS_THRESHOLD, boundary <= BOUNDARY_MASS_THRESHOLD
        ),
    }


HARD_INVARIANTS = ("mass_drift_per_unit_time", "min_value", "entropy_dissipation_margin")


# ---------------------------------------------------------------------------
# Analyses
# ---------------------------------------------------------------------------

def _phi_series(traj):
    mass = traj.mass_series()
    flds = [
        mass_analysis.poisson_potential(f, backend="periodic-spectral").phi
        for f in mass.fields
    ]
    return core.FieldSeries(mass.times, flds)


def analysis_mass_check(traj, net, coeffs, cfg, out_dir, rng):
    log = traj.step_log
    total0 = sum(log[0].masses)
    rows = []
    worst = 0.0
    for r in log:
        rel = abs(sum(r.masses) - total0) / max(abs(total0), 1e-300)
        worst = max(worst, rel)
        rows.append((r.time, sum(r.masses), rel))
    _write_csv(os.path.join(out_dir, "mass_check.csv"),
               ["time", "total_mass", "drift_rel"], rows)
    return {"max_drift_rel": worst}


def analysis_entropy_check(traj, net, coeffs, cfg, out_dir, rng):
    log = traj.step_log
    rows = []
    worst = -np.inf
    ok = True
    for prev, cur in zip(log[:-1], log[1:]):
        dt = cur.time - prev.time
        lhs = (cur.entropy - prev.entropy) / dt + 4.0 * coeffs.d_min * cur.dissipation
        bound = ENTROPY_STEP_FACTOR * dt
        worst = max(worst, lhs - bound)
        ok = ok and lhs <= bound
        rows.append((cur.time, cur.entropy, cur.dissipation, lhs, bound))
    _write_csv(os.path.join(out_dir, "entropy_check.csv"),
               ["time", "entropy", "dissipation", "step_lhs", "step_bound"], rows)
    return {"worst_margin": float(worst), "all_steps_pass": bool(ok)}


def analysis_potential_bound(traj, net, coeffs, cfg, out_dir, rng):
    if traj.grid.dim != 3:
        return {"skipped": "potential bound needs N = 3"}
    m0 = mass_analysis.total_mass(traj.states[0])
    res = mass_analysis.potential_linfty_bound(m0)
    _write_csv(os.path.join(out_dir, "potential_bound.csv"),
               ["lhs_sup_phi", "rhs_bound", "K_N", "radius_opt"],
               [(res.lhs, res.rhs, res.constant, res.radius_opt)])
    return {"lhs": res.lhs, "rhs": res.rhs, "K_N": res.constant,
            "pass": bool(res.lhs <= 1.02 * res.rhs)}


def analysis_holder(traj, net, coeffs, cfg, out_dir, rng):
    phi = _phi_series(traj)
    est = mass_analysis.holder_quotient(
        phi, t0=float(phi.times[0]), pair_budget=cfg.pair_budget, seed=cfg.seed
    )
    rows = list(zip(est.alphas, est.constants))
    _write_csv(os.path.join(out_dir, "holder.csv"), ["alpha", "constant"], rows)
    return {"alpha": est.alpha, "constant": est.constant,
            "sample_count": est.sample_count}


def analysis_weak_norm(traj, net, coeffs, cfg, out_dir, rng):
    t_c = float(traj.times[-1])
    feasible = [e for e in cfg.eps_list if 4 * e ** 2 <= t_c - traj.times[0] + 1e-12]
    if len(feasible) < 2:
        return {"skipped": "trajectory too short for the requested eps list"}
    scan = mass_analysis.weak_norm_scan(
        traj, (t_c, traj.grid.center()), feasible, q=net.growth_exponent
    )
    _write_csv(os.path.join(out_dir, "weak_norm.csv"),
               ["eps", "sup_rescaled_mass"], list(zip(scan.eps, scan.sup_mass)))
    return {"slope": scan.slope, "q": scan.q, "eps_count": len(feasible)}


def analysis_fabes(traj, net, coeffs, cfg, out_dir, rng):
    t_c = float(traj.times[-1])
    if t_c - traj.times[0] < 4.0:
        return {"skipped": "needs 4 time units of coverage"}
    if 2.0 > traj.grid.length / 2.0:
        return {"skipped": "box too small for B_2"}
    chk = duality.fabes_duality_check(traj)
    _write_csv(os.path.join(out_dir, "fabes.csv"),
               ["lhs_cylinder_norm", "rhs_sup_l1", "ratio"],
               [(chk.lhs, chk.rhs_factor, chk.ratio)])
    return {"lhs": chk.lhs, "rhs_factor": chk.rhs_factor, "ratio": chk.ratio}


def analysis_abp(traj, net, coeffs, cfg, out_dir, rng):
    grid = duality.CubeGrid(traj.grid.dim, cfg.abp_grid_n)
    rows = []
    ratios = []
    for k in range(cfg.abp_ensemble):
        member_rng = np.random.default_rng(cfg.seed * 1000003 + k)
        prob = duality.random_dual_problem(grid, member_rng,
                                           d_min=coeffs.d_min, d_max=coeffs.d_max)
        sol = duality.solve_dual_final(prob, dt=0.01)
        ratio = duality.abp_ratio(sol)
        ratios.append(ratio)
        rows.append((k, f"{grid.n}^{grid.dim}", coeffs.d_min, coeffs.d_max, ratio))
    ratios = np.array(ratios)
    rows.append(("max", f"{grid.n}^{grid.dim}", coeffs.d_min, coeffs.d_max,
                 float(ratios.max())))
    rows.append(("p95", f"{grid.n}^{grid.dim}", coeffs.d_min, coeffs.d_max,
                 float(np.percentile(ratios, 95))))
    _write_csv(os.path.join(out_dir, "abp.csv"),
               ["seed", "grid", "d_min", "d_max", "ratio"], rows)
    return {"max_ratio": float(ratios.max()),
            "p95_ratio": float(np.percentile(ratios, 95)),
            "members": cfg.abp_ensemble}


def analysis_degiorgi_ladder(traj, net, coeffs, cfg, out_dir, rng):
    try:
        ladder = degiorgi.compute_ladder(traj, j_max=cfg.ladder_jmax)
    except core.CoverageError as exc:
        return {"skipped": str(exc)}
    rows = [
        (j, ladder.levels.k[j], ladder.levels.t[j], ladder.values[j])
        for j in range(cfg.ladder_jmax + 1)
    ]
    _write_csv(os.path.join(out_dir, "degiorgi_ladder.csv"),
               ["j", "k_j", "t_j", "U_j"], rows)
    summary = {"U_final": float(ladder.values[-1])}
    try:
        fit = degiorgi.ladder_fit(ladder, traj.grid.dim)
        _write_csv(os.path.join(out_dir, "degiorgi_ladder_fit.csv"),
                   ["lambda_fit", "exponent_fit", "predicted_limit", "verdict",
                    "theta", "favored_exponent"],
                   [(fit.lambda_fit, fit.exponent_fit, fit.predicted_limit,
                     fit.verdict, fit.theta, fit.favored_exponent)])
        summary.update({"verdict": fit.verdict, "exponent_fit": fit.exponent_fit})
    except ValueError as exc:
        summary["fit_skipped"] = str(exc)
    return summary


def analysis_rescale_study(traj, net, coeffs, cfg, out_dir, rng):
    t_c = float(traj.times[-1])
    span = t_c - float(traj.times[0])
    feasible = [e for e in cfg.rescale_eps if 4 * e ** 2 <= span + 1e-12]
    if not feasible:
        return {"skipped": "trajectory too short for any requested eps"}
    center = (t_c, traj.grid.center())
    src_res = dynamics.pde_residual(traj, net, coeffs, t_c - span / 2)
    src_norm = float(np.sqrt(sum(core.lp_norm(r, p=2) ** 2 for r in src_res)))
    rows = []
    for e in feasible:
        scaled = dynamics.rescale(traj, center, e, q=net.growth_exponent)
        mid = float(scaled.times[len(scaled.times) // 2])
        res = dynamics.pde_residual(scaled, net, coeffs, mid)
        r_norm = float(np.sqrt(sum(core.lp_norm(r, p=2) ** 2 for r in res)))
        rows.append((e, r_norm, src_norm,
                     r_norm / src_norm if src_norm > 0 else float("nan")))
    _write_csv(os.path.join(out_dir, "rescale_study.csv"),
               ["eps", "residual_norm", "source_residual_norm", "ratio"], rows)
    return {"worst_ratio": max(r[3] for r in rows), "eps": feasible}


ANALYSES = {
    "mass_check": analysis_mass_check,
    "entropy_check": analysis_entropy_check,
    "potential_bound": analysis_potential_bound,
    "holder": analysis_holder,
    "weak_norm": analysis_weak_norm,
    "fabes": analysis_fabes,
    "abp": analysis_abp,
    "degiorgi_ladder": analysis_degiorgi_ladder,
    "rescale_study": analysis_rescale_study,
}


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------

def run_analyses(traj, net, coeffs, cfg, out_dir):
    results = {}
    for name in cfg.analyses:
        rng = np.random.default_rng(cfg.seed)
        results[name] = ANALYSES[name](traj, net, coeffs, cfg, out_dir, rng)
    return results


def _jsonable(obj):
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    raise TypeError(f"not JSON-serializable: {type(obj)}")


def write_summary(out_dir, payload):
    path = os.path.join(out_dir, "summary.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")
    return path


def run_experiment(cfg, out_dir=None):
    """Simulate, analyze, and write every artifact.  Returns (exit status,
    artifact directory, summary dict).

    Exit status 0 means every hard invariant passed; 1 means at least one
    failed; 3 means the simulation itself failed (partial outputs are kept).
    """
    out_dir = out_dir or cfg.out
    os.makedirs(out_dir, exist_ok=True)
    dynamics.set_fft_workers(cfg.threads)

    rng = np.random.default_rng(cfg.seed)
    grid = build_grid(cfg)
    net = build_network(cfg)
    coeffs = build_coeffs(cfg, net.p)
    init = build_initial_state(cfg, grid, net.p, rng)
    sim_cfg = build_sim_config(cfg)

    summary = {
        "seed": cfg.seed,
        "scheme": cfg.scheme,
        "grid": {"dim": cfg.dim, "n": cfg.n, "length": cfg.length},
        "species": net.p,
        "t_end": cfg.t_end,
        "analyses": {},
    }

    try:
        traj = dynamics.simulate(init, net, coeffs, sim_cfg)
        failure = None
    except dynamics.SimulationError as exc:
        traj = exc.trajectory
        failure = str(exc)

    dynamics.save_trajectory(traj, os.path.join(out_dir, "trajectory"))
    summary["frames"] = len(traj.states)
    summary["invariants"] = audit_invariants(traj, coeffs)

    if failure is not None:
        summary["failure"] = failure
        write_summary(out_dir, summary)
        return 3, out_dir, summary

    summary["analyses"] = run_analyses(traj, net, coeffs, cfg, out_dir)

    hard_ok = all(summary["invariants"][k]["pass"] for k in HARD_INVARIANTS)
    summary["hard_invariants_pass"] = bool(hard_ok)
    write_summary(out_dir, summary)
    return (0 if hard_ok else 1), out_dir, summary


def reanalyze(cfg, out_dir=None):
    """Re-run the requested analyses on a stored trajectory directory."""
    out_dir = out_dir or cfg.out
    traj_dir = os.path.join(out_dir, "trajectory")
    if not os.path.isdir(traj_dir):
        raise FileNotFoundError(f"no stored trajectory under {traj_dir}")
    dynamics.set_fft_workers(cfg.threads)
    traj = dynamics.load_trajectory(traj_dir)
    net = build_network(cfg)
    coeffs = build_coeffs(cfg, net.p)
    results = run_analyses(traj, net, coeffs, cfg, out_dir)

    path = os.path.join(out_dir, "summary.json")
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            summary = json.load(fh)
    else:
        summary = {"seed": cfg.seed, "analyses": {}}
    summary.setdefault("analyses", {}).update(results)
    write_summary(out_dir, summary)
    return results
