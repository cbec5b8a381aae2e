"""Reaction-diffusion toolkit for entropy-dissipating systems.

The package simulates systems of diffusing, reacting species with unequal
diffusion coefficients and provides the diagnostic machinery (mass and
entropy audits, potential bounds, Holder/oscillation estimates, duality
norms, level-set energy ladders) used to probe boundedness of solutions.
"""

from entropy_rds.core import (
    Ball,
    CoverageError,
    Cylinder,
    Field,
    FieldSeries,
    Grid,
    SpeciesState,
    Trajectory,
    cylinder_lp_norm,
    lp_norm,
    sup_oscillation,
)

__all__ = [
    "Ball",
    "CoverageError",
    "Cylinder",
    "Field",
    "FieldSeries",
    "Grid",
    "SpeciesState",
    "Trajectory",
    "cylinder_lp_norm",
    "lp_norm",
    "sup_oscillation",
]

__version__ = "0.1.0"
