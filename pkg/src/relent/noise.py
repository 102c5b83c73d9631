"""Truncated cylindrical Wiener process and affine diffusion coefficients.

Each retained mode ``k`` carries a coefficient

    G_k(rho, m) = rho * F_k * d_k + m * H_k

where ``d_k`` is a constant direction (all ones unless per-component
coefficients are configured). Brownian increments come from a Philox stream
keyed by ``(seed, member)`` whose counter encodes the step, so any increment
can be regenerated in isolation and ensemble members never share draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import UsageError, VacuumError
from .grid import Grid

__all__ = [
    "NoiseModel",
    "WienerPath",
    "wiener_increments",
    "eval_G",
    "eval_all_G",
    "ito_correction",
    "noise_forcing_increment",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class NoiseModel:
    F: tuple = ()
    H: tuple = ()
    form: str = "affine"
    tail_budget: float = 0.0
    directions: tuple | None = None  # optional (K, dim) per-component weights of F_k
    custom: Callable | None = field(default=None, compare=False)  # (rho, mom, k) -> vector field

    def __post_init__(self):
        F = tuple(float(f) for f in self.F)
        H = tuple(float(h) for h in self.H)
        if len(F) != len(H):
            raise UsageError(f"F and H must have equal length, got {len(F)} and {len(H)}")
        if not all(np.isfinite(F + H)):
            raise UsageError("noise coefficients must be finite")
        if self.form not in ("affine", "custom"):
            raise UsageError(f"unknown noise form {self.form!r}")
        if self.form == "custom" and self.custom is None:
            raise UsageError("custom noise form needs a coefficient callable")
        if self.tail_budget < 0:
            raise UsageError("tail_budget must be nonnegative")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "H", H)
        if self.directions is not None:
            d = tuple(tuple(float(x) for x in row) for row in self.directions)
            if len(d) != len(F):
                raise UsageError("directions needs one row per mode")
            object.__setattr__(self, "directions", d)

    @classmethod
    def zero(cls, K: int = 8) -> "NoiseModel":
        return cls(F=(0.0,) * K, H=(0.0,) * K)

    @property
    def K(self) -> int:
        return len(self.F)

    @property
    def alpha(self) -> np.ndarray:
        """Lipschitz bounds ``|F_k| + |H_k|`` of the affine coefficients."""
        return np.abs(np.array(self.F)) + np.abs(np.array(self.H))

    @property
    def is_zero(self) -> bool:
        return self.form == "affine" and not any(self.F) and not any(self.H)

    def direction_matrix(self, dim: int) -> np.ndarray:
        if self.directions is None:
            return np.ones((self.K, dim))
        d = np.array(self.directions)
        if d.shape != (self.K, dim):
            raise UsageError(f"directions have shape {d.shape}, expected {(self.K, dim)}")
        return d

    def sublinear_constant(self, dim: int) -> float:
        """``c`` with ``sum_k |G_k|**2 / rho <= c (rho + |m|**2/rho)`` pointwise."""
        dnorm = np.linalg.norm(self.direction_matrix(dim), axis=1)
        return float(np.sum((dnorm * np.abs(self.F) + np.abs(self.H)) ** 2))

    def metadata(self) -> dict:
        return {"K": self.K, "alpha_sum": float(self.alpha.sum()), "tail_budget": self.tail_budget}


@dataclass(frozen=True)
class WienerPath:
    """K independent Brownian motions sampled on a uniform time grid of step ``dt``."""

    seed: int
    member_id: int
    dt: float
    K: int

    def __post_init__(self):
        if not self.dt > 0:
            raise UsageError("dt must be positive")
        if self.K < 0:
            raise UsageError("K must be nonnegative")

    def _generator(self, step: int) -> np.random.Generator:
        key = (int(self.seed) & _MASK64) | ((int(self.member_id) & _MASK64) << 64)
        # step lives in the second counter word; the first one is left free for
        # the draws within the step, so consecutive steps never overlap.
        counter = (int(step) & _MASK64) << 64
        return np.random.Generator(np.random.Philox(key=key, counter=counter))

    def standard_normals(self, step: int) -> np.ndarray:
        if step < 0:
            raise UsageError("step must be nonnegative")
        return self._generator(step).standard_normal(self.K)

    def increments(self, step: int) -> np.ndarray:
        return np.sqrt(self.dt) * self.standard_normals(step)

    def coarse_increment(self, step: int, factor: int) -> np.ndarray:
        """Increment over ``[step*factor*dt, (step+1)*factor*dt)`` as a sum of fine ones."""
        total = np.zeros(self.K)
        for j in range(step * factor, (step + 1) * factor):
            total += self.increments(j)
        return total

    def block(self, start: int, count: int) -> np.ndarray:
        return np.stack([self.increments(s) for s in range(start, start + count)]) if count else np.zeros((0, self.K))


def wiener_increments(path: WienerPath, step: int) -> np.ndarray:
    return path.increments(step)


def eval_all_G(grid: Grid, state, model: NoiseModel) -> np.ndarray:
    """All coefficients at once, shape ``(K, dim) + grid.shape``."""
    if model.form == "custom":
        return np.stack([np.asarray(model.custom(state.rho, state.mom, k + 1), dtype=float) for k in range(model.K)])
    d = model.direction_matrix(grid.dim)
    F = np.array(model.F)[:, None] * d
    H = np.array(model.H)
    expand = (slice(None), slice(None)) + (None,) * grid.dim
    rho = np.asarray(state.rho)
    mom = np.asarray(state.mom)
    return F[expand] * rho[None, None] + H[(slice(None),) + (None,) * (grid.dim + 1)] * mom[None]


def eval_G(grid: Grid, state, model: NoiseModel, k: int) -> np.ndarray:
    """Coefficient of mode ``k`` (1-based) evaluated on ``state``."""
    if not 1 <= k <= model.K:
        raise UsageError(f"mode index {k} outside 1..{model.K}")
    if model.form == "custom":
        return np.asarray(model.custom(state.rho, state.mom, k), dtype=float)
    d = model.direction_matrix(grid.dim)[k - 1]
    expand = (slice(None),) + (None,) * grid.dim
    return model.F[k - 1] * d[expand] * np.asarray(state.rho)[None] + model.H[k - 1] * np.asarray(state.mom)


def _vacuum_guard(rho, G):
    vac = rho <= 0.0
    if np.any(vac):
        nz = np.any(G != 0.0, axis=(0, 1)) & vac
        if np.any(nz):
            idx = tuple(int(i) for i in np.argwhere(nz)[0])
            raise VacuumError(f"noise coefficient nonzero on vacuum cell {idx}", index=idx)


def ito_correction(grid: Grid, state, model: NoiseModel) -> float:
    """``1/2 * int sum_k |G_k|**2 / rho dx``."""
    if model.K == 0 or model.is_zero:
        return 0.0
    rho = np.asarray(state.rho, dtype=float)
    G = eval_all_G(grid, state, model)
    _vacuum_guard(rho, G)
    sq = np.sum(G**2, axis=(0, 1))
    safe = np.where(rho > 0.0, rho, 1.0)
    return 0.5 * grid.integrate(np.where(rho > 0.0, sq / safe, 0.0))


def noise_forcing_increment(grid: Grid, state, model: NoiseModel, dW) -> np.ndarray:
    """``sum_k G_k(rho, m) dW_k`` as a momentum increment."""
    dW = np.asarray(dW, dtype=float)
    if dW.shape != (model.K,):
        raise UsageError(f"expected {model.K} increments, got shape {dW.shape}")
    if model.form == "custom":
        return np.tensordot(dW, eval_all_G(grid, state, model), axes=(0, 0))
    d = model.direction_matrix(grid.dim)
    fvec = (dW * np.array(model.F)) @ d
    hsum = float(dW @ np.array(model.H))
    expand = (slice(None),) + (None,) * grid.dim
    return fvec[expand] * np.asarray(state.rho)[None] + hsum * np.asarray(state.mom)
