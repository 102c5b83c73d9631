"""Monte Carlo drivers: member scheduling, twin coupling, Mach sweeps and reduction.

Every member is a pure function of its arguments and its Wiener path
``(seed, member)``, so results do not depend on scheduling or on the
number of worker processes.
"""

from __future__ import annotations

import csv
import hashlib
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .cns import ModelParams, State, StepperConfig, cfl_dt, em_step, velocity
from .diagnostics import (
    EnsembleStats,
    LedgerBuilder,
    ToyProcess,
    ito_product_residuals,
    ledger_columns,
)
from .errors import CouplingError, NumericalError, ReductionError, StoppingTimeError, UsageError
from .euler import EulerState, StoppingMonitor, check_stop, euler_step
from .grid import Grid
from .noise import NoiseModel, WienerPath
from .thermo import PressureLaw, coercivity_constant, relative_energy
from .trajectory import choose_dt, run_trajectory, step_count

__all__ = [
    "ExperimentPlan",
    "parallel_map",
    "reduce_stats",
    "stats_rows",
    "write_stats_csv",
    "EnergyEnsemble",
    "run_energy_ensemble",
    "restrict",
    "perturb_momentum",
    "TwinResult",
    "run_twin",
    "run_twin_ensemble",
    "fit_gronwall_rate",
    "well_prepared_data",
    "default_sweep_fields",
    "SweepRow",
    "SWEEP_COLUMNS",
    "run_eps_sweep",
    "write_sweep_csv",
    "sweep_verdict",
    "default_toy_pair",
    "run_ito_check",
    "observed_order",
    "coercivity_table",
]

KINDS = ("energy", "twin", "eps_sweep", "ito_check", "coercivity")
MU_RULES = ("eps", "eps2", "custom")


@dataclass(frozen=True)
class ExperimentPlan:
    kind: str
    n_members: int = 1
    seed: int = 0
    t_end: float = 0.5
    resolutions: tuple = (64,)
    eps_list: tuple = ()
    mu_rule: str = "eps"
    mu_custom: tuple = ()
    ledger_every: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise UsageError(f"unknown experiment kind {self.kind!r}")
        if self.n_members < 1:
            raise UsageError("n_members must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise UsageError("seed must be a 64-bit unsigned integer")
        if self.t_end < 0:
            raise UsageError("t_end must be nonnegative")
        if self.mu_rule not in MU_RULES:
            raise UsageError(f"unknown mu_rule {self.mu_rule!r}")
        eps = tuple(float(e) for e in self.eps_list)
        object.__setattr__(self, "eps_list", eps)
        object.__setattr__(self, "resolutions", tuple(int(n) for n in self.resolutions))
        if self.kind == "eps_sweep":
            if not eps:
                raise UsageError("eps_sweep needs a nonempty eps_list")
            if any(b >= a for a, b in zip(eps, eps[1:])):
                raise UsageError("eps_list must be strictly decreasing")
        if self.mu_rule == "custom" and len(self.mu_custom) != len(eps):
            raise UsageError("mu_custom needs one viscosity per eps")

    def mu_for(self, i: int) -> float:
        eps = self.eps_list[i]
        if self.mu_rule == "eps":
            return eps
        if self.mu_rule == "eps2":
            return eps * eps
        return float(self.mu_custom[i])


def parallel_map(fn, items, jobs: int = 1) -> list:
    """Order-preserving map over worker processes (inline when ``jobs == 1``)."""
    items = list(items)
    if jobs < 1:
        raise UsageError("jobs must be >= 1")
    if jobs == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(fn, items))


# ----------------------------------------------------------------------
# reduction


def reduce_stats(ledgers, member_ids=None, columns=None) -> EnsembleStats:
    """Fold member ledgers (sequences of rows) into per-time statistics.

    Members are reduced in sorted id order so the floating-point sums do not
    depend on completion order.
    """
    ledgers = list(ledgers)
    if not ledgers:
        raise ReductionError("need at least one ledger")
    if member_ids is None:
        member_ids = list(range(len(ledgers)))
    if len(member_ids) != len(ledgers):
        raise ReductionError("one member id per ledger required")
    order = np.argsort(np.asarray(member_ids), kind="stable")
    cols = [ledger_columns(ledgers[i]) for i in order]
    t = cols[0]["t"]
    for c in cols[1:]:
        if c["t"].shape != t.shape or not np.array_equal(c["t"], t):
            raise ReductionError("ledger time grids are not aligned")
    names = columns or [k for k in cols[0] if k != "t"]
    stacked = {k: np.stack([c[k] for c in cols]) for k in names}
    return EnsembleStats.from_columns(t, stacked)


def stats_rows(stats: EnsembleStats):
    names = list(stats.mean)
    header = ["t"] + [f"{n}_{s}" for n in names for s in ("mean", "std", "ci")]
    rows = []
    for i, t in enumerate(stats.t):
        row = [t]
        for n in names:
            row += [stats.mean[n][i], stats.std[n][i], stats.ci_halfwidth[n][i]]
        rows.append(row)
    return header, rows


def write_stats_csv(path, stats: EnsembleStats) -> None:
    header, rows = stats_rows(stats)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(x)) for x in r])


# ----------------------------------------------------------------------
# plain energy ensembles


@dataclass
class EnergyEnsemble:
    ledgers: list
    stats: EnsembleStats
    digests: list
    dt: float


def _energy_member(args):
    grid, init, params, cfg, seed, member, dt, t_end, ledger_every = args
    path = WienerPath(seed, member, dt, params.noise.K)
    res = run_trajectory(grid, init, params, cfg, path, t_end, ledger_every)
    return res.ledger, res.increments_digest


def run_energy_ensemble(
    grid: Grid,
    init: State,
    params: ModelParams,
    cfg: StepperConfig,
    plan: ExperimentPlan,
    dt: float | None = None,
    jobs: int = 1,
) -> EnergyEnsemble:
    dt = dt or choose_dt(grid, init, params, cfg, plan.t_end)
    args = [
        (grid, init, params, cfg, plan.seed, m, dt, plan.t_end, plan.ledger_every) for m in range(plan.n_members)
    ]
    out = parallel_map(_energy_member, args, jobs)
    ledgers = [o[0] for o in out]
    return EnergyEnsemble(ledgers, reduce_stats(ledgers), [o[1] for o in out], dt)


# ----------------------------------------------------------------------
# twins


def restrict(fine: Grid, coarse: Grid, f: np.ndarray) -> np.ndarray:
    """Pointwise injection from a nested fine grid (odd refinement factor)."""
    if fine.dim != coarse.dim or fine.n % coarse.n:
        raise UsageError("fine grid must refine the coarse one")
    q = fine.n // coarse.n
    if q % 2 == 0:
        raise UsageError("cell-centred grids nest only for odd refinement factors")
    sl = (Ellipsis,) + (slice(q // 2, None, q),) * fine.dim
    return np.array(f[sl])


def perturb_momentum(grid: Grid, state: State, E0: float, psi: np.ndarray) -> State:
    """Add ``lam * rho * psi`` to the momentum with ``lam`` chosen so the relative energy is ``E0``."""
    if E0 < 0:
        raise UsageError("E0 must be nonnegative")
    if E0 == 0:
        return state
    norm = grid.integrate(state.rho * np.sum(psi**2, axis=0))
    lam = math.sqrt(2.0 * E0 / norm)
    return State(state.t, state.rho, state.mom + lam * state.rho[None] * psi)


@dataclass
class TwinResult:
    t: np.ndarray
    rel_energy: np.ndarray
    weak: list
    weak_digest: str
    strong_digest: str
    grad_sup: float  # sup over time of the strong velocity gradient
    dt: float

    @property
    def coupled(self) -> bool:
        return self.weak_digest == self.strong_digest

    @property
    def E0(self) -> float:
        return float(self.rel_energy[0])

    @property
    def max_rel_energy(self) -> float:
        return float(np.max(self.rel_energy))


def run_twin(
    grid: Grid,
    weak_init: State,
    strong_init: State,
    params: ModelParams,
    cfg: StepperConfig,
    weak_path: WienerPath,
    strong_path: WienerPath,
    t_end: float,
    ledger_every: int = 1,
    strong_grid: Grid | None = None,
) -> TwinResult:
    """Run a weak/strong pair and record their relative energy.

    With ``strong_grid`` the strong twin lives on a refined grid and is
    compared through :func:`restrict`. Both members must use the same time
    grid; they share increments exactly when their paths have equal
    ``(seed, member)``.
    """
    if weak_path.dt != strong_path.dt or weak_path.K != strong_path.K:
        raise CouplingError(f"twin time grids differ: dt {weak_path.dt} vs {strong_path.dt}")
    sg = strong_grid or grid
    dt = weak_path.dt
    n_steps = step_count(t_end, dt)
    weak, strong = weak_init, strong_init
    builder = LedgerBuilder(grid, params)
    hw, hs = hashlib.sha256(), hashlib.sha256()
    t_rows, rel = [], []
    gsup = 0.0

    def _record():
        nonlocal gsup
        r = restrict(sg, grid, strong.rho) if strong_grid else strong.rho
        us = velocity(strong)
        U = restrict(sg, grid, us) if strong_grid else us
        gsup = max(gsup, float(np.max(np.abs(sg.jacobian(us)))))
        e = relative_energy(grid, weak, r, U, params.law, params.eps)
        builder.record(weak, rel_energy=e)
        t_rows.append(weak.t)
        rel.append(e)

    _record()
    for n in range(n_steps):
        dWw = weak_path.increments(n)
        dWs = dWw if strong_path == weak_path else strong_path.increments(n)
        hw.update(dWw.tobytes())
        hs.update(dWs.tobytes())
        builder.advance(weak, dWw, dt)
        try:
            weak = em_step(grid, weak, params, cfg, dWw, dt, step=n).with_time((n + 1) * dt + weak_init.t)
            strong = em_step(sg, strong, params, cfg, dWs, dt, step=n).with_time((n + 1) * dt + strong_init.t)
        except NumericalError as exc:
            exc.last_good = weak
            raise
        if (n + 1) % ledger_every == 0 or n + 1 == n_steps:
            _record()
    return TwinResult(np.array(t_rows), np.array(rel), builder.rows, hw.hexdigest(), hs.hexdigest(), gsup, dt)


def _twin_member(args):
    grid, strong_grid, weak_init, strong_init, params, cfg, seed, member, strong_member, dt, t_end, every = args
    K = params.noise.K
    wp = WienerPath(seed, member, dt, K)
    sp = WienerPath(seed, strong_member, dt, K)
    return run_twin(grid, weak_init, strong_init, params, cfg, wp, sp, t_end, every, strong_grid)


def run_twin_ensemble(
    grid: Grid,
    strong_init: State,
    params: ModelParams,
    cfg: StepperConfig,
    plan: ExperimentPlan,
    E0: float = 0.0,
    psi: np.ndarray | None = None,
    decouple: bool = False,
    refine: int = 1,
    strong_init_fine: State | None = None,
    dt: float | None = None,
    jobs: int = 1,
) -> list[TwinResult]:
    """Twin ensemble. ``refine > 1`` selects the refined-reference variant.

    The weak twin starts from ``strong_init`` with its momentum perturbed to
    relative energy ``E0``; ``decouple`` gives the strong twin a different
    member id (negative control).
    """
    if psi is None:
        psi = np.stack([np.sin(np.pi * c) for c in grid.coords])
    weak_init = perturb_momentum(grid, strong_init, E0, psi)
    sg = None
    s_init = strong_init
    if refine > 1:
        if strong_init_fine is None:
            raise UsageError("the refined variant needs strong initial data on the fine grid")
        sg = Grid(grid.dim, grid.n * refine, grid.length)
        s_init = strong_init_fine
    if dt is None:
        # the pair shares the more restrictive limit
        dts = [choose_dt(grid, weak_init, params, cfg, plan.t_end)]
        dts.append(choose_dt(sg or grid, s_init, params, cfg, plan.t_end))
        dt = min(dts)
    offset = 1 << 32 if decouple else 0
    args = [
        (grid, sg, weak_init, s_init, params, cfg, plan.seed, m, m + offset, dt, plan.t_end, plan.ledger_every)
        for m in range(plan.n_members)
    ]
    return parallel_map(_twin_member, args, jobs)


def fit_gronwall_rate(t, rel, E0: float) -> float:
    """Smallest ``c`` with ``rel(t) <= E0 * exp(c t)`` at every recorded ``t > 0``."""
    t = np.asarray(t, dtype=float)
    rel = np.asarray(rel, dtype=float)
    if E0 <= 0:
        raise UsageError("E0 must be positive to fit a growth rate")
    pos = t > 0
    return float(np.max(np.log(np.maximum(rel[pos], 1e-300) / E0) / t[pos]))


# ----------------------------------------------------------------------
# Mach-number sweep


def well_prepared_data(grid: Grid, eps: float, delta: float, v0, phi, psi) -> State:
    """``rho = 1 + eps*delta*phi``, ``m = v0 + delta*psi``."""
    rho = 1.0 + eps * delta * np.asarray(phi, dtype=float)
    mom = np.asarray(v0, dtype=float) + delta * np.asarray(psi, dtype=float)
    return State(0.0, rho, mom)


def default_sweep_fields(grid: Grid, amplitude: float = 0.0):
    """Smooth zero-mean ``phi``, ``psi`` and a solenoidal ``v0``.

    In 1D ``v0`` is the constant ``amplitude``; in 2D it is a Taylor-Green
    vortex of that amplitude.
    """
    if grid.dim == 1:
        (x,) = grid.coords
        v0 = np.full((1,) + grid.shape, float(amplitude))
        phi = np.cos(np.pi * x)
        psi = np.sin(np.pi * x)[None]
    else:
        x, y = grid.coords
        v0 = amplitude * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y), -np.sin(np.pi * x) * np.cos(np.pi * y)])
        phi = np.cos(np.pi * x) * np.cos(np.pi * y)
        psi = np.stack([np.sin(np.pi * y), np.sin(np.pi * x)])
    return v0, phi, psi


@dataclass(frozen=True)
class SweepRow:
    eps: float
    mu_eps: float
    sup_relE_mean: float
    sup_relE_ci: float
    tau_M_triggered: int
    n_members: int


SWEEP_COLUMNS = tuple(f for f in SweepRow.__dataclass_fields__)


def _largest_divisor_at_most(n: int, cap: int) -> int:
    for f in range(max(1, min(cap, n)), 0, -1):
        if n % f == 0:
            return f
    return 1


def _sweep_member(args):
    """All sweep points of one member, sharing one reference trajectory.

    The reference is stepped once on the base step; each compressible run
    uses sums of ``factor`` base increments. After the stopping time the
    reference is frozen and the compressible run stops at its first step
    past it, so later rows repeat the value at ``t ^ tau_M``.
    """
    grid, noise, cfg, seed, member, dt_base, n_base, specs, v0, M = args
    fine = WienerPath(seed, member, dt_base, noise.K).block(0, n_base)
    rec_steps = []
    need = {0}
    for _, _, factor, every in specs:
        n_steps = n_base // factor
        ks = [0] + [k for k in range(1, n_steps + 1) if k % every == 0 or k == n_steps]
        rec_steps.append(ks)
        need.update(k * factor for k in ks)
    est = EulerState(0.0, v0, None)
    mon = StoppingMonitor(M)
    vs = {0: est.v}
    tau_idx = 0 if check_stop(grid, est, mon) else None
    for j in range(n_base if tau_idx is None else 0):
        est = euler_step(grid, est, noise, dt_base, fine[j], pressure=False)
        if check_stop(grid, est, mon):
            tau_idx = j + 1
            vs[tau_idx] = est.v
            break
        if j + 1 in need:
            vs[j + 1] = est.v
    out = []
    for (params, init, factor, every), ks in zip(specs, rec_steps):
        dt = factor * dt_base
        n_stop = n_base // factor if tau_idx is None else -(-tau_idx // factor)
        state = init
        rel = {0: relative_energy(grid, state, 1.0, vs[0], params.law, params.eps)}
        for n in range(n_stop):
            dW = fine[n * factor : (n + 1) * factor].sum(axis=0)
            state = em_step(grid, state, params, cfg, dW, dt, step=n).with_time((n + 1) * dt)
            if n + 1 == n_stop and tau_idx is not None:
                rel[n + 1] = relative_energy(grid, state, 1.0, vs[tau_idx], params.law, params.eps)
            elif n + 1 in ks:
                rel[n + 1] = relative_energy(grid, state, 1.0, vs[(n + 1) * factor], params.law, params.eps)
        last = rel[max(rel)]
        t = np.array([k * dt for k in ks])
        out.append((t, np.array([rel.get(k, last) if k <= n_stop else last for k in ks]), mon.triggered_at))
    return out


def run_eps_sweep(
    grid: Grid,
    law: PressureLaw,
    noise: NoiseModel,
    cfg: StepperConfig,
    plan: ExperimentPlan,
    fields=None,
    delta_rule: str = "eps",
    M: float = math.inf,
    n_rows: int = 20,
    jobs: int = 1,
):
    """Relative energy between scaled compressible runs and one incompressible reference.

    Per member, every sweep point sees the same Wiener path and the same
    reference trajectory, so the comparison target does not depend on
    ``eps``. Returns ``(rows, [(t, mean, ci) per eps])``.
    """
    if plan.kind != "eps_sweep":
        raise UsageError("plan kind must be eps_sweep")
    v0, phi, psi = fields if fields is not None else default_sweep_fields(grid)
    eps_list = plan.eps_list
    deltas = [e if delta_rule == "eps" else float(delta_rule) for e in eps_list]
    inits, params_list, limits = [], [], []
    for i, eps in enumerate(eps_list):
        p = ModelParams(law, mu=plan.mu_for(i), eta=0.0, eps=eps, noise=noise)
        init = well_prepared_data(grid, eps, deltas[i], v0, phi, psi)
        inits.append(init)
        params_list.append(p)
        limits.append(cfl_dt(grid, init, p, cfg))
    n_base = math.ceil(plan.t_end / min(limits) * (1.0 - 1e-12))
    n_base = 64 * math.ceil(n_base / 64)
    dt_base = plan.t_end / n_base
    specs = []
    for i in range(len(eps_list)):
        factor = _largest_divisor_at_most(n_base, int(limits[i] / dt_base))
        specs.append((params_list[i], inits[i], factor, max(1, (n_base // factor) // n_rows)))
    args = [(grid, noise, cfg, plan.seed, m, dt_base, n_base, specs, v0, M) for m in range(plan.n_members)]
    out = parallel_map(_sweep_member, args, jobs)
    taus = [o[0][2] for o in out if o[0][2] is not None]
    if taus and min(taus) < plan.t_end / 2:
        raise StoppingTimeError(f"reference gradient exceeded M={M} at t={min(taus):.4g} < t_end/2", tau=min(taus))
    rows, series = [], []
    for i, eps in enumerate(eps_list):
        t = out[0][i][0]
        stack = np.stack([o[i][1] for o in out])
        mean = stack.mean(axis=0)
        n = len(out)
        ci = 3.0 * stack.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
        k = int(np.argmax(mean))
        rows.append(SweepRow(eps, params_list[i].mu, float(mean[k]), float(ci[k]), len(taus), n))
        series.append((t, mean, ci))
    return rows, series


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([repr(getattr(r, c)) for c in SWEEP_COLUMNS])


def sweep_verdict(rows, target_ratio: float = 0.25) -> dict:
    means = np.array([r.sup_relE_mean for r in rows])
    cis = np.array([r.sup_relE_ci for r in rows])
    strictly = bool(np.all(np.diff(means) < 0))
    within_ci = bool(np.all(means[1:] - cis[1:] < means[:-1] + cis[:-1]))
    ratio = float(means[-1] / means[0]) if means[0] > 0 else math.nan
    return {
        "strictly_decreasing": strictly,
        "decreasing_within_ci": within_ci,
        "final_ratio": ratio,
        "target_met": bool(ratio <= target_ratio),
        "pass": strictly and within_ci and ratio <= target_ratio,
    }


# ----------------------------------------------------------------------
# Ito product rule


def _toy_s0(x):
    return 1.0 + 0.5 * np.sin(np.pi * x)


def _toy_r0(x):
    return 1.0 + 0.3 * np.cos(np.pi * x)


def _toy_s_drift(t, x, s):
    return 2.0 * (np.cos(np.pi * x) - s)


def _toy_r_drift(t, x, r):
    return 2.0 * (np.sin(np.pi * x) + 1.0 - r * r)


@dataclass(frozen=True)
class _ToyDiffusion:
    sigma: float
    multiplicative: bool
    phase: float = 0.0

    def __call__(self, t, x, z):
        modes = self.sigma * np.stack([np.cos(np.pi * x + self.phase), np.sin(np.pi * x + self.phase)])
        # broadcast the (K, n) modes against fields of shape (..., n)
        modes = modes.reshape((2,) + (1,) * (np.ndim(z) - 1) + x.shape)
        return modes * z[None] if self.multiplicative else np.broadcast_to(modes, (2,) + np.shape(z))


def default_toy_pair(sigma: float = 0.05):
    """Coupled toy fields with order-one drift and small diffusion on two modes."""
    s = ToyProcess(_toy_s0, _toy_s_drift, _ToyDiffusion(sigma, True))
    r = ToyProcess(_toy_r0, _toy_r_drift, _ToyDiffusion(sigma, False, 0.7))
    return s, r


def run_ito_check(
    grid: Grid,
    dts,
    n_paths: int,
    seed: int = 0,
    t_end: float = 1.0,
    Q=None,
    toy=None,
    literal_cross_term: bool = False,
):
    """Ensemble mean and 3-sigma half-width of the terminal residual per ``dt``.

    All step sizes reuse one Brownian path per member, summed from the
    smallest step. Members are advanced together as one vectorised batch.
    """
    dts = sorted(float(d) for d in dts)
    base = dts[0]
    factors = [int(round(d / base)) for d in dts]
    if any(abs(f * base - d) > 1e-12 * d for f, d in zip(factors, dts)):
        raise UsageError("every dt must be an integer multiple of the smallest")
    if Q is None:
        Q = np.polynomial.Polynomial([0.0, 0.0, 0.0, 1.0])
    s_proc, r_proc = toy or default_toy_pair()
    n_fine = int(round(t_end / base))
    K = 2
    fine = np.stack([WienerPath(seed, m, base, K).block(0, n_fine) for m in range(n_paths)], axis=-1)
    means, cis = [], []
    for f, d in zip(factors, dts):
        incs = fine.reshape(n_fine // f, f, K, n_paths).sum(axis=1)
        res = ito_product_residuals(grid, s_proc, r_proc, Q, incs, d, literal_cross_term)
        means.append(res.mean())
        cis.append(3.0 * res.std(ddof=1) / math.sqrt(n_paths) if n_paths > 1 else 0.0)
    return np.array(dts), np.array(means), np.array(cis)


def observed_order(h, err) -> float:
    """Least-squares slope of ``log|err|`` against ``log h``."""
    return float(np.polyfit(np.log(np.asarray(h)), np.log(np.abs(np.asarray(err))), 1)[0])


# ----------------------------------------------------------------------
# coercivity


def coercivity_table(deltas, gammas, a: float = 1.0, samples: int = 801):
    rows = []
    for g in gammas:
        law = PressureLaw(g, a, relax_gamma=True)
        for d in deltas:
            for mode in ("quadratic_band", "residual_gamma"):
                rows.append((g, d, mode, coercivity_constant(d, law, mode, samples)))
    return rows
