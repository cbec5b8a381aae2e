"""Experiment configuration: a small INI-style format with full validation.

The parser reports every problem it finds (with line numbers), not just the
first.  All keys have defaults, so the empty config is valid and describes a
small four-species run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

ANALYSIS_NAMES = (
    "mass_check",
    "entropy_check",
    "potential_bound",
    "holder",
    "weak_norm",
    "fabes",
    "abp",
    "degiorgi_ladder",
    "rescale_study",
)

INIT_KINDS = ("equilibrium", "gaussian-bumps", "single-gaussian")

_SCHEMA = {
    "grid": {"dim": int, "n": int, "length": float},
    "network": {"builtin": str, "file": str},
    "diffusion": {"d": "floats", "d_min": float, "d_max": float},
    "sim": {
        "dt": float,
        "t_end": float,
        "scheme": str,
        "negativity_tolerance": float,
        "max_rejects": int,
        "output_cadence": int,
        "diagnostics_stride": int,
    },
    "init": {"kind": str, "amplitude": "floats", "width": float, "floor": float},
    "run": {"seed": int, "out": str, "analyses": "names", "threads": int},
    "analysis": {
        "eps_list": "floats",
        "abp_ensemble": int,
        "abp_grid_n": int,
        "pair_budget": int,
        "ladder_jmax": int,
        "rescale_eps": "floats",
    },
}


class ConfigError(ValueError):
    """All validation problems found in a config, with line numbers."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class ExperimentConfig:
    dim: int = 2
    n: int = 64
    length: float = 8.0
    network_builtin: str = "four-species"
    network_file: str = None
    d: tuple = None
    d_min: float = None
    d_max: float = None
    dt: float = 1e-3
    t_end: float = 1.0
    scheme: str = "imex-spectral"
    negativity_tolerance: float = 1e-12
    max_rejects: int = 12
    output_cadence: int = 10
    diagnostics_stride: int = 1
    init_kind: str = "gaussian-bumps"
    amplitude: tuple = (1.0,)
    width: float = 0.5
    floor: float = 0.0
    seed: int = 0
    out: str = "out"
    analyses: tuple = ()
    threads: int = 1
    eps_list: tuple = (0.5, 0.25, 0.125, 0.0625, 0.03125)
    abp_ensemble: int = 6
    abp_grid_n: int = 33
    pair_budget: int = 4096
    ladder_jmax: int = 10
    rescale_eps: tuple = (1.0, 0.5, 0.25)


def _parse_floats(text):
    return tuple(float(x) for x in text.replace(",", " ").split())


def _parse_names(text):
    return tuple(x.strip() for x in text.split(",") if x.strip())


def parse_config(text):
    """Parse and validate; returns ExperimentConfig or raises ConfigError
    listing every problem found."""
    errors = []
    values = {}
    seen = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                errors.append(f"line {lineno}: unknown section [{section}]")
                section = None
            continue
        if "=" not in line:
            errors.append(f"line {lineno}: expected key = value, got {line!r}")
            continue
        if section is None:
            errors.append(f"line {lineno}: key outside any known section")
            continue
        key, _, val = line.partition("=")
        key = key.strip()
        val = val.strip()
        schema = _SCHEMA[section]
        if key not in schema:
            errors.append(f"line {lineno}: unknown key {key!r} in section [{section}]")
            continue
        full = (section, key)
        if full in seen:
            errors.append(
                f"line {lineno}: duplicate key {key!r} in [{section}] "
                f"(first set at line {seen[full]})"
            )
            continue
        seen[full] = lineno
        kind = schema[key]
        try:
            if kind is int:
                parsed = int(val)
            elif kind is float:
                parsed = float(val)
            elif kind == "floats":
                parsed = _parse_floats(val)
            elif kind == "names":
                parsed = _parse_names(val)
            else:
                parsed = val
        except ValueError:
            errors.append(f"line {lineno}: cannot parse {key} = {val!r}")
            continue
        values[full] = (parsed, lineno)

    cfg = ExperimentConfig()

    def take(section, key, attr=None):
        if (section, key) in values:
            setattr(cfg, attr or key, values[(section, key)][0])

    take("grid", "dim")
    take("grid", "n")
    take("grid", "length")
    take("network", "builtin", "network_builtin")
    take("network", "file", "network_file")
    take("diffusion", "d")
    take("diffusion", "d_min")
    take("diffusion", "d_max")
    take("sim", "dt")
    take("sim", "t_end")
    take("sim", "scheme")
    take("sim", "negativity_tolerance")
    take("sim", "max_rejects")
    take("sim", "output_cadence")
    take("sim", "diagnostics_stride")
    take("init", "kind", "init_kind")
    take("init", "amplitude")
    take("init", "width")
    take("init", "floor")
    take("run", "seed")
    take("run", "out")
    take("run", "analyses")
    take("run", "threads")
    take("analysis", "eps_list")
    take("analysis", "abp_ensemble")
    take("analysis", "abp_grid_n")
    take("analysis", "pair_budget")
    take("analysis", "ladder_jmax")
    take("analysis", "rescale_eps")

    def lineof(section, key):
        return values.get((section, key), (None, "?"))[1]

    if cfg.dim not in (1, 2, 3):
        errors.append(f"line {lineof('grid', 'dim')}: dim must be 1, 2 or 3")
    if cfg.n < 8 or (cfg.n & (cfg.n - 1)) != 0:
        errors.append(f"line {lineof('grid', 'n')}: n must be a power of two >= 8")
    if cfg.length <= 0:
        errors.append(f"line {lineof('grid', 'length')}: length must be positive")
    if cfg.network_file is not None and not os.path.exists(cfg.network_file):
        errors.append(
            f"line {lineof('network', 'file')}: network file "
            f"{cfg.network_file!r} does not exist"
        )
    if cfg.network_file is None and cfg.network_builtin not in (
        "four-species",
        "pure-diffusion",
    ):
        errors.append(
            f"line {lineof('network', 'builtin')}: unknown builtin network "
            f"{cfg.network_builtin!r}"
        )
    if cfg.scheme not in ("imex-spectral", "explicit"):
        errors.append(f"line {lineof('sim', 'scheme')}: unknown scheme {cfg.scheme!r}")
    if cfg.dt <= 0:
        errors.append(f"line {lineof('sim', 'dt')}: dt must be positive")
    if cfg.t_end <= 0:
        errors.append(f"line {lineof('sim', 't_end')}: t_end must be positive")
    if cfg.output_cadence < 1:
        errors.append(f"line {lineof('sim', 'output_cadence')}: cadence must be >= 1")
    if cfg.diagnostics_stride < 1:
        errors.append(f"line {lineof('sim', 'diagnostics_stride')}: stride must be >= 1")
    if cfg.init_kind not in INIT_KINDS:
        errors.append(
            f"line {lineof('init', 'kind')}: unknown init kind {cfg.init_kind!r} "
            f"(choose from {', '.join(INIT_KINDS)})"
        )
    for name in cfg.analyses:
        if name not in ANALYSIS_NAMES:
            errors.append(
                f"line {lineof('run', 'analyses')}: unknown analysis {name!r} "
                f"(choose from {', '.join(ANALYSIS_NAMES)})"
            )
    if cfg.threads < 1:
        errors.append(f"line {lineof('run', 'threads')}: threads must be >= 1")

    if cfg.d is not None:
        lo = cfg.d_min if cfg.d_min is not None else min(cfg.d)
        hi = cfg.d_max if cfg.d_max is not None else max(cfg.d)
        if not 0 < lo <= hi:
            errors.append(
                f"line {lineof('diffusion', 'd_min')}: need 0 < d_min <= d_max"
            )
        else:
            for i, di in enumerate(cfg.d, start=1):
                if not lo <= di <= hi:
                    errors.append(
                        f"line {lineof('diffusion', 'd')}: coefficient d{i} = {di} "
                        f"violates the declared bounds [{lo}, {hi}]"
                    )

    if errors:
        raise ConfigError(errors)
    return cfg


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())
