"""Energy and relative-energy bookkeeping.

A trajectory produces a ledger: one :class:`LedgerRow` per recorded time
holding the energies, the cumulated dissipation, Ito correction and
stochastic integrals, and, when a reference process is attached, the
relative energy, the cumulated remainder and the martingale samples
``M1..M5``. All cumulated quantities use left-point (Ito) evaluation,
matching the Euler-Maruyama scheme.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from .cns import ModelParams, State, velocity, viscous_form
from .errors import ReferenceBoundError, ReferencePositivityError, UsageError
from .grid import Grid
from .noise import NoiseModel, WienerPath, eval_all_G, ito_correction
from .thermo import PressureLaw, kinetic_density, relative_energy

__all__ = [
    "energy",
    "LedgerRow",
    "LEDGER_COLUMNS",
    "ledger_columns",
    "write_ledger_csv",
    "read_ledger_csv",
    "energy_residual",
    "ReferenceProcess",
    "reference_constant",
    "reference_from_cns",
    "reference_from_euler",
    "reference_consistency",
    "RemainderTerms",
    "remainder",
    "relative_energy_expansion",
    "martingale_increments",
    "LedgerBuilder",
    "rei_residual",
    "gronwall_envelope",
    "EnsembleStats",
    "martingale_estimate",
    "ToyProcess",
    "ito_product_check",
    "ito_product_residuals",
    "Verdict",
]


def energy(grid: Grid, state, law: PressureLaw, eps: float = 1.0) -> tuple[float, float]:
    """``(kinetic, potential)``; the potential carries the weight ``1/eps**2``."""
    kin = grid.integrate(kinetic_density(state.rho, state.mom))
    pot = grid.integrate(law.H(np.asarray(state.rho))) / eps**2
    return kin, pot


# ----------------------------------------------------------------------
# ledgers

_NAN = float("nan")


@dataclass(frozen=True)
class LedgerRow:
    t: float
    mass: float
    kinetic: float
    potential: float
    total: float
    dissipation_cum: float = 0.0
    ito_cum: float = 0.0
    stoch_cum: float = 0.0
    rel_energy: float = _NAN
    remainder_cum: float = _NAN
    M1: float = _NAN  # int U . G dW
    M2: float = _NAN  # int m . D^s U dW
    M3: float = _NAN  # int rho U . D^s U dW
    M4: float = _NAN  # int p'(r) D^s r dW
    M5: float = _NAN  # int rho H''(r) D^s r dW
    visc_rel_cum: float = _NAN
    energy_residual: float = _NAN
    rei_residual: float = _NAN


LEDGER_COLUMNS = tuple(f.name for f in fields(LedgerRow))


def ledger_columns(rows) -> dict[str, np.ndarray]:
    return {name: np.array([getattr(r, name) for r in rows], dtype=float) for name in LEDGER_COLUMNS}


def write_ledger_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LEDGER_COLUMNS)
        for r in rows:
            w.writerow([repr(float(getattr(r, c))) for c in LEDGER_COLUMNS])


def read_ledger_csv(path) -> list[LedgerRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LEDGER_COLUMNS:
            raise UsageError(f"{path}: unexpected ledger columns")
        return [LedgerRow(**{k: float(v) for k, v in row.items()}) for row in reader]


def energy_residual(rows, s_idx: int, t_idx: int) -> float:
    """``[E]_s^t + D(s,t) - I(s,t) - M_E(s,t)``; the energy inequality says this is <= 0."""
    if s_idx > t_idx:
        raise UsageError("need s_idx <= t_idx")
    if s_idx == t_idx:
        return 0.0
    a, b = rows[s_idx], rows[t_idx]
    return (
        (b.total - a.total)
        + (b.dissipation_cum - a.dissipation_cum)
        - (b.ito_cum - a.ito_cum)
        - (b.stoch_cum - a.stoch_cum)
    )


def rei_residual(rows, s_idx: int, t_idx: int) -> float:
    """Residual of the relative energy inequality on ``[t_s, t_t]`` (<= 0 predicted)."""
    if s_idx > t_idx:
        raise UsageError("need s_idx <= t_idx")
    if s_idx == t_idx:
        return 0.0
    a, b = rows[s_idx], rows[t_idx]
    d = lambda name: getattr(b, name) - getattr(a, name)  # noqa: E731
    m_re = d("stoch_cum") - d("M1") - d("M2") + d("M3") + d("M4") - d("M5")
    return d("rel_energy") + d("visc_rel_cum") - d("remainder_cum") - m_re


# ----------------------------------------------------------------------
# reference processes


@dataclass(frozen=True, eq=False)
class ReferenceProcess:
    """A test pair ``(r, U)`` at one time, with its Ito drift and per-mode diffusion.

    ``diff_r`` has shape ``(K,) + grid.shape``, ``diff_U`` has shape
    ``(K, dim) + grid.shape``.
    """

    t: float
    r: np.ndarray
    U: np.ndarray
    drift_r: np.ndarray
    drift_U: np.ndarray
    diff_r: np.ndarray
    diff_U: np.ndarray
    r_lower: float = 0.0
    r_upper: float = math.inf

    def check_bounds(self):
        if np.any(self.r <= 0.0):
            raise ReferencePositivityError("reference density must be positive")
        lo, hi = float(np.min(self.r)), float(np.max(self.r))
        if lo < self.r_lower or hi > self.r_upper:
            raise ReferenceBoundError(
                f"reference density range [{lo:.4g}, {hi:.4g}] leaves [{self.r_lower}, {self.r_upper}] at t={self.t:.6g}"
            )


def reference_constant(grid: Grid, r0: float, U0, K: int, t: float = 0.0) -> ReferenceProcess:
    U = np.broadcast_to(np.asarray(U0, dtype=float).reshape((grid.dim,) + (1,) * grid.dim), (grid.dim,) + grid.shape)
    return ReferenceProcess(
        t=t,
        r=grid.constant(r0),
        U=np.array(U),
        drift_r=grid.zeros(),
        drift_U=grid.zeros(1),
        diff_r=np.zeros((K,) + grid.shape),
        diff_U=np.zeros((K, grid.dim) + grid.shape),
    )


def reference_from_cns(grid: Grid, state: State, params: ModelParams, cfg=None) -> ReferenceProcess:
    """Reference built from a compressible solution: ``r = rho``, ``U = m/rho``.

    ``r`` has no noise part, so ``dU = dm/rho - U drho/rho`` carries no Ito
    correction.
    """
    from .cns import drift_rhs

    drho, dmom = drift_rhs(grid, state, params, cfg)
    r = np.array(state.rho)
    U = velocity(state)
    G = eval_all_G(grid, state, params.noise) if params.noise.K else np.zeros((0, grid.dim) + grid.shape)
    return ReferenceProcess(
        t=state.t,
        r=r,
        U=U,
        drift_r=drho,
        drift_U=(dmom - U * drho[None]) / r[None],
        diff_r=np.zeros((params.noise.K,) + grid.shape),
        diff_U=G / r[None, None],
    )


def reference_from_euler(grid: Grid, estate, model: NoiseModel) -> ReferenceProcess:
    """Reference for the low-Mach limit: ``r = 1``, ``U = v``.

    The drift of ``U`` is ``-v . grad v - grad Pi`` and its diffusion is
    ``F_k + v H_k``.
    """
    from .euler import euler_drift

    v = np.array(estate.v)
    d = model.direction_matrix(grid.dim)
    expand = (slice(None), slice(None)) + (None,) * grid.dim
    diff_U = (np.array(model.F)[:, None] * d)[expand] + np.array(model.H)[(slice(None),) + (None,) * (grid.dim + 1)] * v[None]
    return ReferenceProcess(
        t=estate.t,
        r=grid.constant(1.0),
        U=v,
        drift_r=grid.zeros(),
        drift_U=euler_drift(grid, v),
        diff_r=np.zeros((model.K,) + grid.shape),
        diff_U=diff_U,
    )


def reference_consistency(ref0: ReferenceProcess, ref1: ReferenceProcess, dW, dt: float) -> tuple[float, float]:
    """Sup-norm defects of the one-step Ito decomposition for ``r`` and ``U``."""
    dW = np.asarray(dW, dtype=float)
    er = ref1.r - ref0.r - dt * ref0.drift_r - np.tensordot(dW, ref0.diff_r, axes=(0, 0))
    eU = ref1.U - ref0.U - dt * ref0.drift_U - np.tensordot(dW, ref0.diff_U, axes=(0, 0))
    return float(np.max(np.abs(er))), float(np.max(np.abs(eU)))


# ----------------------------------------------------------------------
# remainder


@dataclass(frozen=True)
class RemainderTerms:
    viscous: float
    inertial: float
    density: float
    pressure: float
    noise_kinetic: float
    noise_h3: float
    noise_p2: float

    @property
    def total(self) -> float:
        return (
            self.viscous
            + self.inertial
            + self.density
            + self.pressure
            + self.noise_kinetic
            + self.noise_h3
            + self.noise_p2
        )

    def as_dict(self) -> dict:
        d = asdict(self)
        d["total"] = self.total
        return d


def remainder(grid: Grid, state: State, ref: ReferenceProcess, params: ModelParams, G=None) -> RemainderTerms:
    """Itemised remainder of the relative energy inequality.

    The pressure law is taken with the ``1/eps**2`` weight, so the same code
    serves the scaled system. ``G`` (all noise coefficients on ``state``)
    may be passed in to avoid recomputation.
    """
    ref.check_bounds()
    law = params.scaled_law
    rho = np.asarray(state.rho)
    u = velocity(state)
    r, U = ref.r, ref.U
    w = U - u

    viscous = viscous_form(grid, w, U, params.mu, params.eta) if (params.mu or params.eta) else 0.0
    JU = grid.jacobian(U)
    u_grad_U = np.einsum("j...,ij...->i...", u, JU)
    inertial = grid.integrate(rho * np.sum((ref.drift_U + u_grad_U) * w, axis=0))
    grad_dH = grid.grad(law.dH(r))
    density = grid.integrate((r - rho) * law.d2H(r) * ref.drift_r + np.sum(grad_dH * (r * U - rho * u), axis=0))
    pressure = -grid.integrate(grid.div(U) * (law.p(rho) - law.p(r)))

    K = params.noise.K
    if K:
        if G is None:
            G = eval_all_G(grid, state, params.noise)
        diff = G - rho[None, None] * ref.diff_U
        sq = np.sum(diff**2, axis=(0, 1))
        safe = np.where(rho > 0, rho, 1.0)
        noise_kinetic = 0.5 * grid.integrate(np.where(rho > 0, sq / safe, 0.0))
        dr2 = np.sum(ref.diff_r**2, axis=0)
        # d(-int rho H'(r)) contributes -1/2 rho H'''(r) |D^s r|^2.
        noise_h3 = -0.5 * grid.integrate(rho * law.d3H(r) * dr2)
        noise_p2 = 0.5 * grid.integrate(law.d2p(r) * dr2)
    else:
        noise_kinetic = noise_h3 = noise_p2 = 0.0
    return RemainderTerms(viscous, inertial, density, pressure, noise_kinetic, noise_h3, noise_p2)


def relative_energy_expansion(grid: Grid, state, r, U, law: PressureLaw, eps: float = 1.0) -> float:
    """Relative energy assembled from the energy and the four coupling integrals."""
    rho = np.asarray(state.rho)
    m = np.asarray(state.mom)
    r = np.broadcast_to(np.asarray(r, dtype=float), grid.shape)
    U = np.broadcast_to(np.asarray(U, dtype=float), (grid.dim,) + grid.shape)
    lw = law if eps == 1.0 else law.scaled(1.0 / eps**2)
    kin, pot = energy(grid, state, lw)
    return (
        kin
        + pot
        - grid.integrate(np.sum(m * U, axis=0))
        + 0.5 * grid.integrate(rho * np.sum(U**2, axis=0))
        - grid.integrate(rho * lw.dH(r))
        + grid.integrate(lw.dH(r) * r - lw.H(r))
    )


def martingale_increments(grid: Grid, state: State, ref: ReferenceProcess, law: PressureLaw, G, dW) -> np.ndarray:
    """One-step increments of ``M1..M5`` (law already carrying any Mach weight)."""
    dW = np.asarray(dW, dtype=float)
    rho = np.asarray(state.rho)
    GdW = np.tensordot(dW, G, axes=(0, 0))
    DUdW = np.tensordot(dW, ref.diff_U, axes=(0, 0))
    DrdW = np.tensordot(dW, ref.diff_r, axes=(0, 0))
    return np.array(
        [
            grid.integrate(np.sum(ref.U * GdW, axis=0)),
            grid.integrate(np.sum(np.asarray(state.mom) * DUdW, axis=0)),
            grid.integrate(rho * np.sum(ref.U * DUdW, axis=0)),
            grid.integrate(law.dp(ref.r) * DrdW),
            grid.integrate(rho * law.d2H(ref.r) * DrdW),
        ]
    )


class LedgerBuilder:
    """Accumulates ledger rows along one trajectory.

    Call :meth:`record` at ledger times and :meth:`advance` once per step
    *before* the state is updated, with the increments used by that step.
    """

    def __init__(self, grid: Grid, params: ModelParams, with_reference: bool = False, track_remainder: bool = True):
        self.grid = grid
        self.params = params
        self.with_reference = with_reference
        self.track_remainder = track_remainder and with_reference
        self.rows: list[LedgerRow] = []
        self._diss = 0.0
        self._ito = 0.0
        self._stoch = 0.0
        self._rem = 0.0
        self._visc_rel = 0.0
        self._M = np.zeros(5)
        self._noisy = params.noise.K > 0 and not params.noise.is_zero

    def record(self, state: State, ref: ReferenceProcess | None = None, rel_energy: float | None = None) -> LedgerRow:
        """Append a row; ``rel_energy`` fills that column when no reference is tracked."""
        g, p = self.grid, self.params
        kin, pot = energy(g, state, p.law, p.eps)
        extra = {}
        if rel_energy is not None:
            extra["rel_energy"] = float(rel_energy)
        if self.with_reference:
            if ref is None:
                raise UsageError("this ledger tracks a reference; pass it to record()")
            extra["rel_energy"] = relative_energy(g, state, ref.r, ref.U, p.law, p.eps)
            if self.track_remainder:
                extra.update(
                    remainder_cum=self._rem,
                    visc_rel_cum=self._visc_rel,
                    **{f"M{i + 1}": float(self._M[i]) for i in range(5)},
                )
        row = LedgerRow(
            t=state.t,
            mass=g.integrate(state.rho),
            kinetic=kin,
            potential=pot,
            total=kin + pot,
            dissipation_cum=self._diss,
            ito_cum=self._ito,
            stoch_cum=self._stoch,
            **extra,
        )
        self.rows.append(row)
        res = {"energy_residual": energy_residual(self.rows, 0, len(self.rows) - 1)}
        if self.track_remainder:
            res["rei_residual"] = rei_residual(self.rows, 0, len(self.rows) - 1)
        row = _replace(row, **res)
        self.rows[-1] = row
        return row

    def advance(self, state: State, dW, dt: float, ref: ReferenceProcess | None = None) -> None:
        g, p = self.grid, self.params
        u = velocity(state)
        if p.mu or p.eta:
            self._diss += dt * viscous_form(g, u, u, p.mu, p.eta)
        G = None
        if self._noisy:
            G = eval_all_G(g, state, p.noise)
            self._ito += dt * ito_correction(g, state, p.noise)
            self._stoch += g.integrate(np.sum(u * np.tensordot(np.asarray(dW), G, axes=(0, 0)), axis=0))
        if self.track_remainder:
            if ref is None:
                raise UsageError("this ledger tracks a reference; pass it to advance()")
            self._rem += dt * remainder(g, state, ref, p, G).total
            if p.mu or p.eta:
                w = u - ref.U
                self._visc_rel += dt * viscous_form(g, w, w, p.mu, p.eta)
            if self._noisy:
                self._M += martingale_increments(g, state, ref, p.scaled_law, G, dW)


def _replace(row: LedgerRow, **changes) -> LedgerRow:
    d = asdict(row)
    d.update(changes)
    return LedgerRow(**d)


# ----------------------------------------------------------------------
# Gronwall envelope and ensemble verdicts


def gronwall_envelope(E0: float, cM: float, t):
    return E0 * np.exp(cM * np.asarray(t, dtype=float)) if np.ndim(t) else E0 * math.exp(cM * t)


@dataclass(frozen=True)
class Verdict:
    """Tri-state outcome of an inequality check with its budgets."""

    status: str  # "pass" | "fail" | "inconclusive"
    value: float
    statistical: float = 0.0
    discretization: float = 0.0

    @classmethod
    def judge(cls, value: float, statistical: float = 0.0, discretization: float = 0.0) -> "Verdict":
        if value <= discretization:
            status = "pass"
        elif value <= discretization + statistical:
            status = "inconclusive"
        else:
            status = "fail"
        return cls(status, float(value), float(statistical), float(discretization))

    @property
    def ok(self) -> bool:
        return self.status != "fail"


@dataclass(frozen=True)
class EnsembleStats:
    """Per-column, per-time mean, standard deviation and 3-sigma half-width."""

    n_members: int
    t: np.ndarray
    mean: dict = field(default_factory=dict)
    std: dict = field(default_factory=dict)
    ci_halfwidth: dict = field(default_factory=dict)

    @classmethod
    def from_columns(cls, t, columns: dict) -> "EnsembleStats":
        """``columns`` maps a name to an array of shape ``(members, times)``."""
        n = None
        mean, std, ci = {}, {}, {}
        for name, arr in columns.items():
            arr = np.asarray(arr, dtype=float)
            n = arr.shape[0]
            mean[name] = arr.mean(axis=0)
            std[name] = arr.std(axis=0, ddof=1) if n > 1 else np.zeros(arr.shape[1])
            ci[name] = 3.0 * std[name] / math.sqrt(n)
        return cls(n or 0, np.asarray(t, dtype=float), mean, std, ci)


def martingale_estimate(stats: EnsembleStats, column: str = "stoch_cum", min_members: int = 16):
    """Return ``(mean, ci, verdict)``; the verdict holds if ``|mean| <= ci`` at every time."""
    if stats.n_members < min_members:
        raise UsageError(f"need at least {min_members} members, got {stats.n_members}")
    if column not in stats.mean:
        raise UsageError(f"column {column!r} not in ensemble statistics")
    mean = stats.mean[column]
    ci = stats.ci_halfwidth[column]
    verdict = bool(np.all(np.abs(mean) <= ci))
    return mean, ci, verdict


# ----------------------------------------------------------------------
# Ito product rule check


@dataclass(frozen=True)
class ToyProcess:
    """Scalar field process ``dz = drift(t, x, z) dt + sum_k diffusion(t, x, z)[k] dW_k``."""

    initial: Callable
    drift: Callable
    diffusion: Callable  # returns shape (K,) + grid.shape


def ito_product_check(
    grid: Grid,
    s_proc: ToyProcess,
    r_proc: ToyProcess,
    Q,
    path: WienerPath,
    t_end: float,
    factor: int = 1,
    literal_cross_term: bool = False,
) -> float:
    """Terminal residual of the Ito product rule for ``int s Q(r)``.

    Both processes are advanced by Euler-Maruyama with step
    ``factor * path.dt`` on increments summed from ``path``. The left side
    is the exact change of ``int s Q(r)``; the right side sums the drift
    terms, the cross-variation and the martingale increments. ``Q`` is a
    :class:`numpy.polynomial.Polynomial` of degree at most 4.

    The cross-variation of ``s`` and ``Q(r)`` is ``Q'(r) D^s s . D^s r``.
    ``literal_cross_term`` drops the ``Q'(r)`` factor; that variant is only
    correct for ``Q' == 1`` and is kept to demonstrate the resulting bias.
    """
    dt = factor * path.dt
    n_steps = int(round(t_end / dt))
    incs = path.block(0, n_steps * factor).reshape(n_steps, factor, path.K).sum(axis=1)
    return float(ito_product_residuals(grid, s_proc, r_proc, Q, incs[:, :, None], dt, literal_cross_term)[0])


def ito_product_residuals(grid: Grid, s_proc, r_proc, Q, incs, dt: float, literal_cross_term: bool = False):
    """Vectorised core of :func:`ito_product_check`.

    ``incs`` has shape ``(steps, K, N)``: one column of increments per path.
    The toy callables receive fields of shape ``(N,) + grid.shape``.
    Returns the ``N`` terminal residuals.
    """
    if Q.degree() > 4:
        raise UsageError("Q must have degree <= 4")
    dQ, d2Q = Q.deriv(1), Q.deriv(2)
    incs = np.asarray(incs, dtype=float)
    n_steps, K, N = incs.shape
    x = grid.coords[0] if grid.dim == 1 else grid.coords
    axes = tuple(range(-grid.dim, 0))

    def integ(f):
        return np.sum(f, axis=axes) * grid.cell_volume

    def noise(dW, S):
        return np.einsum("kn,kn...->n...", dW, S)

    t = 0.0
    s = np.broadcast_to(np.asarray(s_proc.initial(x), dtype=float), (N,) + grid.shape).copy()
    r = np.broadcast_to(np.asarray(r_proc.initial(x), dtype=float), (N,) + grid.shape).copy()
    start = integ(s * Q(r))
    rhs = np.zeros(N)
    for n in range(n_steps):
        dW = incs[n]
        Ds, Dr = s_proc.drift(t, x, s), r_proc.drift(t, x, r)
        Ss = np.broadcast_to(s_proc.diffusion(t, x, s), (K, N) + grid.shape)
        Sr = np.broadcast_to(r_proc.diffusion(t, x, r), (K, N) + grid.shape)
        Qr, dQr = Q(r), dQ(r)
        drift = (
            s * (dQr * Dr + 0.5 * d2Q(r) * np.sum(Sr**2, axis=0))
            + Qr * Ds
            + (1.0 if literal_cross_term else dQr) * np.sum(Ss * Sr, axis=0)
        )
        mart = noise(dW, s * dQr * Sr + Qr * Ss)
        rhs += dt * integ(drift) + integ(mart)
        s = s + dt * Ds + noise(dW, Ss)
        r = r + dt * Dr + noise(dW, Sr)
        t += dt
    return integ(s * Q(r)) - start - rhs
