"""Periodic uniform grids and the spatial operators used by the solvers.

Fields are plain numpy arrays laid out on cell centres:

* scalar field: shape ``(n,) * dim``
* vector field: shape ``(dim,) + (n,) * dim``
* rank-2 tensor: shape ``(dim, dim) + (n,) * dim``

The finite-difference operators are second-order central stencils with
periodic wrap-around. The spectral operators act on the same samples through
the FFT and are used where exactness matters (Helmholtz projection, pressure
recovery).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import UnsupportedDimensionError, UsageError

__all__ = ["Grid", "diff_op", "integrate", "helmholtz_project"]


def _shift(f: np.ndarray, k: int, ax: int) -> np.ndarray:
    """Periodic shift, same result as ``np.roll(f, k, axis=ax)`` with less overhead."""
    n = f.shape[ax]
    k %= n
    if k == 0:
        return f.copy()
    out = np.empty_like(f)
    pre = (slice(None),) * ax
    out[pre + (slice(k, None),)] = f[pre + (slice(None, n - k),)]
    out[pre + (slice(None, k),)] = f[pre + (slice(n - k, None),)]
    return out


@dataclass(frozen=True)
class Grid:
    dim: int
    n: int
    length: float = 2.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise UnsupportedDimensionError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 8 or self.n % 2:
            raise UsageError(f"n must be even and >= 8, got {self.n}")
        if not self.length > 0:
            raise UsageError(f"length must be positive, got {self.length}")

    @property
    def dx(self) -> float:
        return self.length / self.n

    @property
    def cell_volume(self) -> float:
        return self.dx**self.dim

    @property
    def measure(self) -> float:
        return self.length**self.dim

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @cached_property
    def x1d(self) -> np.ndarray:
        """Cell-centre coordinates of one axis, on [-length/2, length/2)."""
        return -0.5 * self.length + (np.arange(self.n) + 0.5) * self.dx

    @cached_property
    def coords(self) -> tuple[np.ndarray, ...]:
        return tuple(np.meshgrid(*([self.x1d] * self.dim), indexing="ij"))

    # ------------------------------------------------------------------
    # field helpers

    def rank(self, f: np.ndarray) -> int:
        f = np.asarray(f)
        r = f.ndim - self.dim
        if r < 0 or f.shape[r:] != self.shape or any(s != self.dim for s in f.shape[:r]):
            raise UsageError(f"array of shape {f.shape} is not a field on {self}")
        return r

    def zeros(self, rank: int = 0) -> np.ndarray:
        return np.zeros((self.dim,) * rank + self.shape)

    def constant(self, value, rank: int = 0) -> np.ndarray:
        return np.full((self.dim,) * rank + self.shape, float(value))

    def is_compatible(self, other: "Grid") -> bool:
        return self == other

    # ------------------------------------------------------------------
    # finite differences

    def partial(self, f: np.ndarray, axis: int) -> np.ndarray:
        """Central difference along a spatial axis; keeps the rank of ``f``."""
        r = self.rank(f)
        if not 0 <= axis < self.dim:
            raise UsageError(f"axis {axis} out of range for dim={self.dim}")
        ax = r + axis
        return (_shift(f, -1, ax) - _shift(f, 1, ax)) / (2.0 * self.dx)

    def grad(self, f: np.ndarray) -> np.ndarray:
        if self.rank(f) != 0:
            raise UsageError("grad expects a scalar field")
        return np.stack([self.partial(f, a) for a in range(self.dim)])

    def jacobian(self, v: np.ndarray) -> np.ndarray:
        """``J[i, j] = d v_i / d x_j`` for a vector field ``v``."""
        if self.rank(v) != 1:
            raise UsageError("jacobian expects a vector field")
        return np.stack([self.grad(v[i]) for i in range(self.dim)])

    def div(self, f: np.ndarray) -> np.ndarray:
        """Divergence over the last tensor index (vector -> scalar, tensor -> vector)."""
        r = self.rank(f)
        if r == 1:
            return sum(self.partial(f[j], j) for j in range(self.dim))
        if r == 2:
            return np.stack([self.div(f[i]) for i in range(self.dim)])
        raise UsageError(f"div needs a vector or tensor field, got rank {r}")

    def laplacian(self, f: np.ndarray) -> np.ndarray:
        """Composed stencil ``div(grad f)``, applied componentwise."""
        r = self.rank(f)
        out = np.zeros_like(f, dtype=float)
        for a in range(self.dim):
            ax = r + a
            out += (_shift(f, -2, ax) - 2.0 * f + _shift(f, 2, ax)) / (4.0 * self.dx**2)
        return out

    def laplacian_compact(self, f: np.ndarray) -> np.ndarray:
        """Three-point Laplacian; damps the grid-scale mode that ``laplacian`` misses."""
        r = self.rank(f)
        out = np.zeros_like(f, dtype=float)
        for a in range(self.dim):
            ax = r + a
            out += (_shift(f, -1, ax) - 2.0 * f + _shift(f, 1, ax)) / self.dx**2
        return out

    def integrate(self, f: np.ndarray) -> float:
        if self.rank(f) != 0:
            raise UsageError("integrate expects a scalar field")
        return float(np.sum(f) * self.cell_volume)

    def inner(self, f: np.ndarray, g: np.ndarray) -> float:
        """Discrete L2 inner product of two fields of equal rank."""
        if self.rank(f) != self.rank(g):
            raise UsageError("inner product of fields with different ranks")
        return float(np.sum(f * g) * self.cell_volume)

    # ------------------------------------------------------------------
    # spectral operators

    @cached_property
    def wavenumbers(self) -> np.ndarray:
        """Angular wavenumbers per axis, shape ``(dim,) + shape``."""
        k1 = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)
        return np.stack(np.meshgrid(*([k1] * self.dim), indexing="ij"))

    @cached_property
    def derivative_wavenumbers(self) -> np.ndarray:
        # Nyquist entry zeroed so odd derivatives of real fields stay real.
        k1 = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.dx)
        k1[self.n // 2] = 0.0
        return np.stack(np.meshgrid(*([k1] * self.dim), indexing="ij"))

    @cached_property
    def k2(self) -> np.ndarray:
        return np.sum(self.wavenumbers**2, axis=0)

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        kmax = np.pi / self.dx
        keep = np.all(np.abs(self.wavenumbers) < (2.0 / 3.0) * kmax, axis=0)
        return keep.astype(float)

    def fft(self, f: np.ndarray) -> np.ndarray:
        r = self.rank(f)
        return np.fft.fftn(f, axes=tuple(range(r, r + self.dim)))

    def ifft(self, fh: np.ndarray, rank: int) -> np.ndarray:
        return np.real(np.fft.ifftn(fh, axes=tuple(range(rank, rank + self.dim))))

    def spectral_partial(self, f: np.ndarray, axis: int) -> np.ndarray:
        r = self.rank(f)
        return self.ifft(1j * self.derivative_wavenumbers[axis] * self.fft(f), r)

    def spectral_grad(self, f: np.ndarray) -> np.ndarray:
        if self.rank(f) != 0:
            raise UsageError("spectral_grad expects a scalar field")
        fh = self.fft(f)
        return np.stack([self.ifft(1j * k * fh, 0) for k in self.derivative_wavenumbers])

    def spectral_div(self, v: np.ndarray) -> np.ndarray:
        if self.rank(v) != 1:
            raise UsageError("spectral_div expects a vector field")
        vh = self.fft(v)
        return self.ifft(np.sum(1j * self.derivative_wavenumbers * vh, axis=0), 0)

    def spectral_jacobian(self, v: np.ndarray) -> np.ndarray:
        if self.rank(v) != 1:
            raise UsageError("spectral_jacobian expects a vector field")
        vh = self.fft(v)
        return np.stack(
            [np.stack([self.ifft(1j * k * vh[i], 0) for k in self.derivative_wavenumbers]) for i in range(self.dim)]
        )

    def inverse_laplacian(self, f: np.ndarray) -> np.ndarray:
        """Zero-mean solution of ``lap(u) = f - mean(f)``."""
        if self.rank(f) != 0:
            raise UsageError("inverse_laplacian expects a scalar field")
        fh = self.fft(f)
        k2 = self.k2.copy()
        k2[(0,) * self.dim] = 1.0
        uh = -fh / k2
        uh[(0,) * self.dim] = 0.0
        return self.ifft(uh, 0)

    def dealias(self, f: np.ndarray) -> np.ndarray:
        r = self.rank(f)
        return self.ifft(self.fft(f) * self.dealias_mask, r)

    def helmholtz_project(self, v: np.ndarray) -> np.ndarray:
        """Project a vector field onto discretely divergence-free fields."""
        if self.rank(v) != 1:
            raise UsageError("helmholtz_project expects a vector field")
        if self.dim == 1:
            if np.ptp(v) > 0.0:
                raise UnsupportedDimensionError(
                    "in 1D only constant fields are solenoidal; projection of a nonconstant field is undefined"
                )
            return np.array(v, dtype=float)
        k = self.derivative_wavenumbers
        kk = np.sum(k**2, axis=0)
        kk[kk == 0.0] = 1.0
        vh = self.fft(v)
        kdotv = np.sum(k * vh, axis=0)
        return self.ifft(vh - k * (kdotv / kk), 1)


def diff_op(grid: Grid, f: np.ndarray, kind: str, axis: int | None = None) -> np.ndarray:
    """Dispatch to a finite-difference operator by name.

    ``kind`` is one of ``"grad"``, ``"div"``, ``"laplacian"`` or ``"partial"``
    (the last one needs ``axis``).
    """
    if kind == "grad":
        return grid.grad(f)
    if kind == "div":
        return grid.div(f)
    if kind == "laplacian":
        return grid.laplacian(f)
    if kind == "partial":
        if axis is None:
            raise UsageError("partial derivative needs an axis")
        return grid.partial(f, axis)
    raise UsageError(f"unknown operator kind {kind!r}")


def integrate(grid: Grid, f: np.ndarray) -> float:
    return grid.integrate(f)


def helmholtz_project(grid: Grid, v: np.ndarray) -> np.ndarray:
    return grid.helmholtz_project(v)
