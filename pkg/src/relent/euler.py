"""Pseudo-spectral solver for the incompressible stochastic Euler system.

Only the 2D torus carries nontrivial solenoidal fields; in 1D a
divergence-free velocity is a constant and the solver reduces to the SDE
``dv = (F + v H) dW``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, UsageError
from .grid import Grid
from .noise import NoiseModel

__all__ = [
    "EulerState",
    "StoppingMonitor",
    "euler_drift",
    "convective_term",
    "pressure_recover",
    "euler_step",
    "check_stop",
    "gradient_sup",
]


@dataclass(frozen=True, eq=False)
class EulerState:
    t: float
    v: np.ndarray
    Pi: np.ndarray | None  # None when the step skipped pressure recovery
    defect: float = 0.0  # sup-norm of what the last projection removed

    def __post_init__(self):
        v = np.array(self.v, dtype=float)
        v.flags.writeable = False
        object.__setattr__(self, "v", v)
        if self.Pi is not None:
            Pi = np.array(self.Pi, dtype=float)
            Pi.flags.writeable = False
            object.__setattr__(self, "Pi", Pi)

    def pressure(self, grid: Grid) -> np.ndarray:
        return self.Pi if self.Pi is not None else pressure_recover(grid, self.v)

    @classmethod
    def from_velocity(cls, grid: Grid, t: float, v) -> "EulerState":
        v = np.asarray(v, dtype=float)
        return cls(t, v, pressure_recover(grid, v))


@dataclass
class StoppingMonitor:
    """Latches the first time the velocity gradient exceeds ``M``."""

    M: float = math.inf
    triggered_at: float | None = None

    @property
    def triggered(self) -> bool:
        return self.triggered_at is not None


def _is_constant(v) -> bool:
    return all(np.ptp(c) == 0.0 for c in v)


def convective_term(grid: Grid, v: np.ndarray) -> np.ndarray:
    """Dealiased ``v . grad v`` (2/3 rule on the input and on the product)."""
    if grid.rank(v) != 1:
        raise UsageError("convective_term expects a vector field")
    if grid.dim == 1:
        if not _is_constant(v):
            raise UsageError("1D incompressible velocity must be constant")
        return np.zeros_like(v)
    w = grid.dealias(v)
    J = grid.spectral_jacobian(w)
    adv = np.einsum("j...,ij...->i...", w, J)
    return grid.dealias(adv)


def euler_drift(grid: Grid, v: np.ndarray) -> np.ndarray:
    """``-P_H[v . grad v]``."""
    adv = convective_term(grid, v)
    if grid.dim == 1:
        return adv
    return -grid.helmholtz_project(adv)


def pressure_recover(grid: Grid, v: np.ndarray) -> np.ndarray:
    """Zero-mean pressure with ``grad Pi = -(I - P_H)[v . grad v]``."""
    if grid.dim == 1:
        if grid.rank(v) != 1 or not _is_constant(v):
            raise UsageError("1D incompressible velocity must be constant")
        return grid.zeros()
    adv = convective_term(grid, v)
    Pi = -grid.inverse_laplacian(grid.spectral_div(adv))
    return Pi - np.mean(Pi)


def _noise_increment(grid: Grid, v: np.ndarray, model: NoiseModel, dW) -> np.ndarray:
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (model.K,):
        raise UsageError(f"expected {model.K} increments, got shape {dW.shape}")
    if model.form != "affine":
        raise UsageError("the Euler solver supports affine noise only")
    fvec = (dW * np.array(model.F)) @ model.direction_matrix(grid.dim)
    hsum = float(dW @ np.array(model.H))
    return fvec[(slice(None),) + (None,) * grid.dim] + hsum * v


def euler_step(grid: Grid, state: EulerState, model: NoiseModel, dt: float, dW, pressure: bool = True) -> EulerState:
    """Euler-Maruyama step followed by a projection back onto solenoidal fields.

    ``pressure=False`` skips the pressure recovery (about half the cost in 2D).
    """
    v = state.v
    raw = v + dt * euler_drift(grid, v) + _noise_increment(grid, v, model, dW)
    if grid.dim == 1:
        new_v = raw
        defect = 0.0
    else:
        new_v = grid.helmholtz_project(raw)
        defect = float(np.max(np.abs(raw - new_v)))
    t = state.t + dt
    if not np.all(np.isfinite(new_v)):
        raise DivergenceError(f"nonfinite Euler velocity at t={t:.6g}", t=t)
    return EulerState(t, new_v, pressure_recover(grid, new_v) if pressure else None, defect)


def gradient_sup(grid: Grid, v: np.ndarray) -> float:
    """Largest entry of ``|d v_i / d x_j|`` over the grid."""
    if grid.dim == 1 and _is_constant(v):
        return 0.0
    return float(np.max(np.abs(grid.spectral_jacobian(v))))


def check_stop(grid: Grid, state: EulerState, mon: StoppingMonitor) -> bool:
    if mon.triggered:
        return True
    if math.isinf(mon.M):
        return False
    if gradient_sup(grid, state.v) > mon.M:
        mon.triggered_at = state.t
        return True
    return False
