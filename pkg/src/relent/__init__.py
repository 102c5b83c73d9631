"""Relative-energy laboratory for the stochastic compressible Navier-Stokes system."""

from .cns import ModelParams, State, StepperConfig, cfl_dt, drift_rhs, em_step, stress_divergence
from .diagnostics import (
    EnsembleStats,
    LedgerRow,
    ReferenceProcess,
    energy,
    energy_residual,
    gronwall_envelope,
    ito_product_check,
    martingale_estimate,
    rei_residual,
    remainder,
)
from .errors import (
    CoercivityError,
    ConfigError,
    CouplingError,
    DivergenceError,
    NumericalError,
    PositivityError,
    ReductionError,
    RelentError,
    UsageError,
    VacuumError,
)
from .euler import EulerState, StoppingMonitor, euler_step, pressure_recover
from .grid import Grid, diff_op, helmholtz_project, integrate
from .noise import NoiseModel, WienerPath, eval_G, ito_correction, noise_forcing_increment, wiener_increments
from .thermo import PressureLaw, bregman, coercivity_constant, pressure, pressure_potential, relative_energy
from .trajectory import run_trajectory

__all__ = [
    "ModelParams",
    "State",
    "StepperConfig",
    "cfl_dt",
    "drift_rhs",
    "em_step",
    "stress_divergence",
    "EnsembleStats",
    "LedgerRow",
    "ReferenceProcess",
    "energy",
    "energy_residual",
    "gronwall_envelope",
    "ito_product_check",
    "martingale_estimate",
    "rei_residual",
    "remainder",
    "CoercivityError",
    "ConfigError",
    "CouplingError",
    "DivergenceError",
    "NumericalError",
    "PositivityError",
    "ReductionError",
    "RelentError",
    "UsageError",
    "VacuumError",
    "EulerState",
    "StoppingMonitor",
    "euler_step",
    "pressure_recover",
    "Grid",
    "diff_op",
    "helmholtz_project",
    "integrate",
    "NoiseModel",
    "WienerPath",
    "eval_G",
    "ito_correction",
    "noise_forcing_increment",
    "wiener_increments",
    "PressureLaw",
    "bregman",
    "coercivity_constant",
    "pressure",
    "pressure_potential",
    "relative_energy",
    "run_trajectory",
]

__version__ = "0.1.0"
