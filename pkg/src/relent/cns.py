"""Euler-Maruyama stepping for the stochastic compressible Navier-Stokes system.

Conservative variables ``(rho, m)`` on a periodic grid. Fluxes are
central, so the discrete totals of mass and (without noise) momentum
telescope to roundoff. Stabilisation comes only from the physical viscosity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, PositivityError, UsageError
from .grid import Grid
from .noise import NoiseModel, noise_forcing_increment
from .thermo import PressureLaw

log = logging.getLogger(__name__)

__all__ = [
    "State",
    "ModelParams",
    "StepperConfig",
    "velocity",
    "stress_divergence",
    "viscous_form",
    "drift_rhs",
    "cfl_dt",
    "em_step",
]


@dataclass(frozen=True, eq=False)
class State:
    t: float
    rho: np.ndarray
    mom: np.ndarray

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float)
        mom = np.array(self.mom, dtype=float)
        if mom.shape != (rho.ndim,) + rho.shape:
            raise UsageError(f"momentum shape {mom.shape} does not match density shape {rho.shape}")
        rho.flags.writeable = False
        mom.flags.writeable = False
        object.__setattr__(self, "t", float(self.t))
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "mom", mom)

    @classmethod
    def from_velocity(cls, t, rho, u):
        rho = np.asarray(rho, dtype=float)
        return cls(t, rho, rho[None] * np.asarray(u, dtype=float))

    def with_time(self, t):
        return State(t, self.rho, self.mom)

    def velocity(self) -> np.ndarray:
        return velocity(self)

    def identical(self, other: "State") -> bool:
        """Bitwise equality of the fields and the time."""
        return (
            self.t == other.t
            and self.rho.tobytes() == other.rho.tobytes()
            and self.mom.tobytes() == other.mom.tobytes()
        )


@dataclass(frozen=True)
class ModelParams:
    """Physical parameters. ``eps`` is the Mach number; ``eps == 1`` is the unscaled system."""

    law: PressureLaw = field(default_factory=PressureLaw)
    mu: float = 0.1
    eta: float = 0.0
    eps: float = 1.0
    noise: NoiseModel = field(default_factory=NoiseModel.zero)

    def __post_init__(self):
        if self.mu < 0 or self.eta < 0:
            raise UsageError("viscosities must be nonnegative")
        if not 0.0 < self.eps <= 1.0:
            raise UsageError(f"eps must lie in (0, 1], got {self.eps}")

    @property
    def scaled_law(self) -> PressureLaw:
        """Pressure law carrying the ``1/eps**2`` factor."""
        return self.law if self.eps == 1.0 else self.law.scaled(1.0 / self.eps**2)

    @property
    def bulk_coefficient(self) -> float:
        return 4.0 * self.mu / 3.0 + self.eta


@dataclass(frozen=True)
class StepperConfig:
    cfl: float = 0.4
    rho_floor: float = 1e-8
    max_dt: float = 1e-2
    viscous_treatment: str = "explicit"

    def __post_init__(self):
        if not 0.0 < self.cfl <= 1.0:
            raise UsageError(f"cfl must lie in (0, 1], got {self.cfl}")
        if not self.rho_floor >= 0:
            raise UsageError("rho_floor must be nonnegative")
        if not self.max_dt > 0:
            raise UsageError("max_dt must be positive")
        if self.viscous_treatment not in ("explicit", "semi_implicit"):
            raise UsageError(f"unknown viscous treatment {self.viscous_treatment!r}")


def velocity(state: State) -> np.ndarray:
    rho = state.rho
    safe = np.where(rho > 0, rho, 1.0)
    return np.where(rho > 0, state.mom / safe, 0.0)


def stress_divergence(grid: Grid, u: np.ndarray, mu: float, eta: float) -> np.ndarray:
    """``div S(grad u)`` for the Newtonian stress.

    Written as ``mu * lap u + (mu/3 + eta) * grad div u``; the Laplacian uses
    the compact three-point stencil and ``grad div`` the composed central one.
    In 1D this is ``(4 mu/3 + eta) u_xx`` up to the choice of stencil.
    """
    if grid.rank(u) != 1:
        raise UsageError("stress_divergence expects a vector field")
    out = mu * grid.laplacian_compact(u)
    lam = mu / 3.0 + eta
    if lam:
        out = out + lam * grid.grad(grid.div(u))
    return out


def viscous_form(grid: Grid, a: np.ndarray, b: np.ndarray, mu: float, eta: float) -> float:
    """Symmetric dissipation form ``-int a . div S(grad b)``; equals ``int S(grad b):grad a``."""
    return -grid.inner(a, stress_divergence(grid, b, mu, eta))


def _floor_check(state: State, floor: float):
    low = state.rho < floor
    if np.any(low):
        idx = tuple(int(i) for i in np.argwhere(low)[0])
        raise PositivityError(
            f"density {state.rho[idx]:.3e} below floor {floor:.1e} at cell {idx}, t={state.t:.6g}",
            t=state.t,
            index=idx,
        )


def drift_rhs(grid: Grid, state: State, params: ModelParams, cfg: StepperConfig | None = None):
    """Deterministic tendencies ``(drho, dmom)`` in flux form (noise excluded)."""
    cfg = cfg or StepperConfig()
    _floor_check(state, cfg.rho_floor)
    rho, m = state.rho, state.mom
    u = m / rho
    drho = -grid.div(m)
    flux = m[:, None] * u[None, :]
    p = params.scaled_law.p(rho)
    dmom = -grid.div(flux) - grid.grad(p)
    if params.mu or params.eta:
        dmom = dmom + stress_divergence(grid, u, params.mu, params.eta)
    return drho, dmom


def cfl_dt(grid: Grid, state: State, params: ModelParams, cfg: StepperConfig | None = None) -> float:
    cfg = cfg or StepperConfig()
    u = velocity(state)
    umax = float(np.max(np.sqrt(np.sum(u**2, axis=0))))
    cs = float(np.sqrt(params.law.dp(np.max(state.rho))))
    dt = grid.dx / (umax + cs / params.eps)
    nu = params.bulk_coefficient / float(np.min(state.rho))
    if cfg.viscous_treatment == "explicit" and nu > 0:
        dt = min(dt, grid.dx**2 / (2.0 * grid.dim * nu))
    return min(cfg.cfl * dt, cfg.max_dt)


def _implicit_viscous(grid: Grid, rho_new, m_star, dt, params: ModelParams):
    """Conservative semi-implicit viscous update.

    Solves ``(rho_bar - dt L) w = rho_bar u*`` mode by mode, where ``L`` is
    the Fourier symbol of :func:`stress_divergence` and ``rho_bar`` the mean
    density, then returns ``m* + dt L w``.
    """
    mu, lam = params.mu, params.mu / 3.0 + params.eta
    rho_bar = float(np.mean(rho_new))
    u_star = m_star / rho_new
    k = grid.wavenumbers
    lam_c = np.sum(2.0 - 2.0 * np.cos(k * grid.dx), axis=0) / grid.dx**2
    s = np.sin(k * grid.dx) / grid.dx
    alpha = rho_bar + dt * mu * lam_c
    beta = dt * lam
    bh = rho_bar * grid.fft(u_star)
    sdotb = np.sum(s * bh, axis=0)
    wh = (bh - beta * s * sdotb / (alpha + beta * np.sum(s**2, axis=0))) / alpha
    w = grid.ifft(wh, 1)
    return m_star + dt * stress_divergence(grid, w, params.mu, params.eta)


def em_step(
    grid: Grid,
    state: State,
    params: ModelParams,
    cfg: StepperConfig,
    dW,
    dt: float | None = None,
    step: int | None = None,
) -> State:
    """One Euler-Maruyama step. ``dW`` must have been drawn with variance ``dt``."""
    if dt is None:
        dt = cfl_dt(grid, state, params, cfg)
    if cfg.viscous_treatment == "semi_implicit" and (params.mu or params.eta):
        inviscid = ModelParams(params.law, 0.0, 0.0, params.eps, params.noise)
        drho, dmom = drift_rhs(grid, state, inviscid, cfg)
    else:
        drho, dmom = drift_rhs(grid, state, params, cfg)
    rho_new = state.rho + dt * drho
    mom_new = state.mom + dt * dmom
    if params.noise.K and not params.noise.is_zero:
        mom_new = mom_new + noise_forcing_increment(grid, state, params.noise, dW)
    if cfg.viscous_treatment == "semi_implicit" and (params.mu or params.eta):
        if np.all(rho_new > 0):
            mom_new = _implicit_viscous(grid, rho_new, mom_new, dt, params)
    t_new = state.t + dt
    if not (np.all(np.isfinite(rho_new)) and np.all(np.isfinite(mom_new))):
        raise DivergenceError(f"nonfinite values after step at t={t_new:.6g}", t=t_new, step=step)
    new = State(t_new, rho_new, mom_new)
    try:
        _floor_check(new, cfg.rho_floor)
    except PositivityError as exc:
        exc.step = step
        raise
    return new
