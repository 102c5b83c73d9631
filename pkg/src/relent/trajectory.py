"""Trajectory driver: repeated Euler-Maruyama steps with ledger recording."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field

from .cns import ModelParams, State, StepperConfig, cfl_dt, em_step
from .diagnostics import LedgerBuilder, LedgerRow
from .errors import NumericalError, UsageError
from .grid import Grid
from .noise import WienerPath
from .snapshot import write_checkpoint

log = logging.getLogger(__name__)

__all__ = ["choose_dt", "step_count", "TrajectoryResult", "run_trajectory"]


def choose_dt(grid: Grid, init: State, params: ModelParams, cfg: StepperConfig, t_end: float) -> float:
    """Largest ``t_end / N`` not exceeding the stability limit of ``init``."""
    limit = cfl_dt(grid, init, params, cfg)
    if t_end <= 0:
        return limit
    return t_end / math.ceil(t_end / limit * (1.0 - 1e-12))


def step_count(t_end: float, dt: float) -> int:
    n = int(round(t_end / dt))
    if abs(n * dt - t_end) > 1e-9 * max(1.0, t_end):
        raise UsageError(f"t_end={t_end} is not a multiple of dt={dt}")
    return n


@dataclass
class TrajectoryResult:
    final: State
    ledger: list[LedgerRow]
    dt: float
    steps: int
    increments_digest: str = ""
    extra: dict = field(default_factory=dict)

    def __iter__(self):
        # allows ``final, ledger = run_trajectory(...)``
        yield self.final
        yield self.ledger


def run_trajectory(
    grid: Grid,
    init: State,
    params: ModelParams,
    cfg: StepperConfig,
    path: WienerPath,
    t_end: float,
    ledger_every: int = 1,
    checkpoint: str | None = None,
) -> TrajectoryResult:
    """Advance ``init`` to ``t_end`` with the fixed step ``path.dt``.

    Ledger rows are written at ``t = 0``, every ``ledger_every`` steps and at
    the final step. On a numerical failure the last good state is written to
    ``checkpoint`` (if given) and attached to the re-raised error as
    ``last_good`` together with the partial ledger.
    """
    if ledger_every < 1:
        raise UsageError("ledger_every must be >= 1")
    if path.K != params.noise.K:
        raise UsageError(f"Wiener path has {path.K} modes, noise model {params.noise.K}")
    if t_end == 0:
        return TrajectoryResult(init, [], path.dt, 0)
    if t_end < 0:
        raise UsageError("t_end must be nonnegative")
    n_steps = step_count(t_end, path.dt)
    limit = cfl_dt(grid, init, params, StepperConfig(1.0, cfg.rho_floor, math.inf, cfg.viscous_treatment))
    if path.dt > limit:
        log.warning("dt=%.3g exceeds the unit-CFL limit %.3g of the initial state", path.dt, limit)

    builder = LedgerBuilder(grid, params)
    digest = hashlib.sha256()
    state = init
    builder.record(state)
    try:
        for n in range(n_steps):
            dW = path.increments(n)
            digest.update(dW.tobytes())
            builder.advance(state, dW, path.dt)
            state = em_step(grid, state, params, cfg, dW, path.dt, step=n)
            # accumulate time as n*dt so ledgers of equal dt align exactly
            state = state.with_time(init.t + (n + 1) * path.dt)
            if (n + 1) % ledger_every == 0 or n + 1 == n_steps:
                builder.record(state)
    except NumericalError as exc:
        exc.last_good = state
        if exc.step is None:
            exc.step = n
        exc.ledger = builder.rows
        if checkpoint is not None:
            write_checkpoint(
                checkpoint,
                grid,
                state,
                {"seed": path.seed, "member": path.member_id, "step": exc.step, "error": str(exc)},
            )
        raise
    return TrajectoryResult(state, builder.rows, path.dt, n_steps, digest.hexdigest())
