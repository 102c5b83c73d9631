"""Barotropic pressure law, pressure potential and the relative energy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CoercivityError, PositivityError, ReferencePositivityError, UsageError, VacuumError
from .grid import Grid

__all__ = [
    "PressureLaw",
    "EssResSplit",
    "pressure",
    "pressure_potential",
    "bregman",
    "bregman_ratio",
    "kinetic_density",
    "relative_energy",
    "ess_res_split",
    "coercivity_constant",
]


@dataclass(frozen=True)
class PressureLaw:
    """``p(rho) = a * rho**gamma``.

    ``gamma > 3/2`` is enforced unless ``relax_gamma`` is set; ``gamma > 1``
    is always required so that the pressure potential is finite.
    """

    gamma: float = 2.0
    a: float = 1.0
    relax_gamma: bool = False

    def __post_init__(self):
        if not self.a > 0:
            raise UsageError(f"pressure coefficient must be positive, got a={self.a}")
        if not self.gamma > 1.0:
            raise UsageError(f"gamma must exceed 1, got {self.gamma}")
        if not self.relax_gamma and not self.gamma > 1.5:
            raise UsageError(f"gamma > 3/2 required (got {self.gamma}); set relax_gamma to override")

    @property
    def p_infinity(self) -> float:
        return self.a * self.gamma

    def scaled(self, factor: float) -> "PressureLaw":
        """Law with ``a`` multiplied by ``factor`` (used for the 1/eps**2 Mach scaling)."""
        return PressureLaw(self.gamma, self.a * factor, relax_gamma=True)

    # p and its derivatives
    def p(self, rho):
        return self.a * np.power(rho, self.gamma)

    def dp(self, rho):
        return self.a * self.gamma * np.power(rho, self.gamma - 1.0)

    def d2p(self, rho):
        return self.a * self.gamma * (self.gamma - 1.0) * np.power(rho, self.gamma - 2.0)

    # pressure potential H and its derivatives
    def H(self, rho):
        return self.a / (self.gamma - 1.0) * np.power(rho, self.gamma)

    def dH(self, rho):
        return self.a * self.gamma / (self.gamma - 1.0) * np.power(rho, self.gamma - 1.0)

    def d2H(self, rho):
        return self.a * self.gamma * np.power(rho, self.gamma - 2.0)

    def d3H(self, rho):
        return self.a * self.gamma * (self.gamma - 2.0) * np.power(rho, self.gamma - 3.0)


def _check_nonnegative(rho, what="density"):
    rho = np.asarray(rho, dtype=float)
    bad = np.argwhere(rho < 0)
    if bad.size:
        idx = tuple(int(i) for i in bad[0])
        raise PositivityError(f"negative {what} at cell {idx}", index=idx)
    return rho


def pressure(rho, law: PressureLaw):
    rho = _check_nonnegative(rho)
    return law.p(rho)


def pressure_potential(rho, law: PressureLaw):
    """``H(rho) = rho * int_0^rho p(z)/z**2 dz`` in closed form."""
    rho = _check_nonnegative(rho)
    return law.H(rho)


def _excess_power(s, gamma):
    """``(1+s)**gamma - 1 - gamma*s`` without cancellation near ``s = 0``."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    small = np.abs(s) < 1e-3
    if np.any(small):
        ss = s[small]
        coef = gamma * (gamma - 1.0) / 2.0
        acc = coef * ss**2
        for j in range(3, 9):
            coef *= (gamma - j + 1.0) / j
            acc += coef * ss**j
        out[small] = acc
    big = ~small
    if np.any(big):
        sb = s[big]
        with np.errstate(divide="ignore"):
            out[big] = np.expm1(gamma * np.log1p(sb)) - gamma * sb
    return out


def bregman(rho, r, law: PressureLaw):
    """Pointwise ``H(rho) - H'(r)(rho - r) - H(r)``, evaluated stably."""
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    rho, r = np.broadcast_arrays(rho, r)
    s = rho / r - 1.0
    return law.a / (law.gamma - 1.0) * np.power(r, law.gamma) * _excess_power(s, law.gamma)


def bregman_ratio(rho, r, law: PressureLaw):
    """``bregman(rho, r) / (rho - r)**2``; tends to ``H''(r)/2`` on the diagonal."""
    rho = np.asarray(rho, dtype=float)
    r = np.asarray(r, dtype=float)
    return bregman(rho, r, law) / (rho - r) ** 2


def kinetic_density(rho, mom, U=None):
    """Pointwise ``|m - rho U|**2 / (2 rho)`` with the vacuum convention.

    ``rho`` has the grid shape, ``mom`` and ``U`` carry a leading component
    axis. Cells with ``rho == 0`` contribute zero if the momentum vanishes
    there and raise :class:`VacuumError` otherwise.
    """
    rho = np.asarray(rho, dtype=float)
    rel = np.asarray(mom, dtype=float)
    if U is not None:
        rel = rel - rho * np.asarray(U, dtype=float)
    sq = np.sum(rel**2, axis=0)
    vac = rho == 0.0
    if np.any(vac):
        if np.any(sq[vac] != 0.0):
            idx = tuple(int(i) for i in np.argwhere(vac & (sq != 0.0))[0])
            raise VacuumError(f"nonzero momentum on vacuum cell {idx}", index=idx)
        safe = np.where(vac, 1.0, rho)
        return np.where(vac, 0.0, 0.5 * sq / safe)
    return 0.5 * sq / rho


def relative_energy(grid: Grid, state, r, U, law: PressureLaw, eps: float = 1.0) -> float:
    """Relative energy of ``state`` (density, momentum) with respect to ``(r, U)``.

    The potential part carries the Mach-number weight ``1/eps**2``.
    """
    if not 0.0 < eps <= 1.0:
        raise UsageError(f"eps must lie in (0, 1], got {eps}")
    r = np.broadcast_to(np.asarray(r, dtype=float), grid.shape)
    if np.any(r <= 0.0):
        idx = tuple(int(i) for i in np.argwhere(r <= 0.0)[0])
        raise ReferencePositivityError(f"reference density must be positive (cell {idx})")
    rho = _check_nonnegative(state.rho)
    U = np.broadcast_to(np.asarray(U, dtype=float), (grid.dim,) + grid.shape)
    integrand = kinetic_density(rho, state.mom, U) + bregman(rho, r, law) / eps**2
    return grid.integrate(integrand)


@dataclass(frozen=True)
class EssResSplit:
    """Density cut-off that separates the essential band from the residual part.

    The weight is 1 on ``[rho_lower, rho_upper]``, 0 outside
    ``[rho_lower*(1-w), rho_upper*(1+w)]`` and a C1 smoothstep in between,
    where ``w`` is ``transition_width``.
    """

    rho_lower: float
    rho_upper: float
    transition_width: float = 0.2

    def __post_init__(self):
        if not 0.0 < self.rho_lower < self.rho_upper:
            raise UsageError("need 0 < rho_lower < rho_upper")
        if not 0.0 < self.transition_width < 1.0:
            raise UsageError("transition_width must lie in (0, 1)")

    def weight(self, rho):
        rho = np.asarray(rho, dtype=float)
        lo_out = self.rho_lower * (1.0 - self.transition_width)
        hi_out = self.rho_upper * (1.0 + self.transition_width)
        up = np.clip((rho - lo_out) / (self.rho_lower - lo_out), 0.0, 1.0)
        down = np.clip((hi_out - rho) / (hi_out - self.rho_upper), 0.0, 1.0)
        return _smoothstep(up) * _smoothstep(down)


def _smoothstep(s):
    return s * s * (3.0 - 2.0 * s)


def ess_res_split(h, rho, split: EssResSplit):
    """Return ``(ess, res)`` with ``ess = Phi(rho) h`` and ``res = h - ess``."""
    h = np.asarray(h, dtype=float)
    phi = split.weight(rho)
    if h.shape[-phi.ndim:] != phi.shape:
        raise UsageError(f"field shape {h.shape} does not match density shape {phi.shape}")
    # the smaller share is formed by subtraction, which is exact (Sterbenz),
    # so ess + res reproduces h bit for bit
    big = phi >= 0.5
    ess_direct = phi * h
    res_direct = (1.0 - phi) * h
    ess = np.where(big, ess_direct, h - res_direct)
    res = np.where(big, h - ess_direct, res_direct)
    return ess, res


def coercivity_constant(delta: float, law: PressureLaw, mode: str = "quadratic_band", samples: int = 801) -> float:
    """Brute-force lower bound of the Bregman divergence on a sample grid.

    ``quadratic_band``: min of ``bregman / |rho - r|**2`` over
    ``delta <= rho, r <= 1/delta`` (diagonal excluded).

    ``residual_gamma``: min of ``bregman / (1 + rho**gamma)`` over
    ``delta <= r <= 1/delta`` and ``rho`` outside ``[delta/2, 2/delta]``.
    """
    if not 0.0 < delta < 1.0:
        raise UsageError(f"delta must lie in (0, 1), got {delta}")
    r = np.geomspace(delta, 1.0 / delta, samples)
    if mode == "quadratic_band":
        rho = r
        R, P = np.meshgrid(r, rho, indexing="ij")
        off = P != R
        vals = bregman_ratio(P[off], R[off], law)
    elif mode == "residual_gamma":
        low = np.concatenate([[0.0], np.geomspace(delta * 1e-6, delta / 2.0, samples // 2)[:-1]])
        high = np.geomspace(2.0 / delta, 1e4 / delta, samples // 2)[1:]
        rho = np.concatenate([low, high])
        R, P = np.meshgrid(r, rho, indexing="ij")
        vals = bregman(P, R, law) / (1.0 + P**law.gamma)
    else:
        raise UsageError(f"unknown coercivity mode {mode!r}")
    c = float(np.min(vals))
    if not c > 0.0:
        raise CoercivityError(f"nonpositive coercivity constant {c} for delta={delta}, {law}")
    return c
