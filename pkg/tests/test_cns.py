import math

import numpy as np
import pytest

from relent.cns import ModelParams, State, StepperConfig, cfl_dt, drift_rhs, em_step, stress_divergence
from relent.diagnostics import energy_residual
from relent.errors import DivergenceError, PositivityError, UsageError
from relent.grid import Grid
from relent.noise import NoiseModel, WienerPath
from relent.snapshot import read_checkpoint
from relent.thermo import PressureLaw
from relent.trajectory import choose_dt, run_trajectory, step_count


def smooth_1d(grid, amp=0.1):
    (x,) = grid.coords
    return State.from_velocity(0.0, 1.0 + amp * np.sin(np.pi * x), (amp * np.cos(np.pi * x))[None])


def smooth_2d(grid, amp=0.1):
    x, y = grid.coords
    rho = 1.0 + amp * np.sin(np.pi * x) * np.sin(np.pi * y)
    u = amp * np.stack([np.cos(np.pi * x) * np.sin(np.pi * y), -np.sin(np.pi * x) * np.cos(np.pi * y)])
    return State.from_velocity(0.0, rho, u)


def _run(grid, init, params, cfg, dt, t_end, seed=0, member=0):
    path = WienerPath(seed, member, dt, params.noise.K)
    return run_trajectory(grid, init, params, cfg, path, t_end)


def test_state_shape_check():
    g = Grid(1, 8)
    with pytest.raises(UsageError):
        State(0.0, g.zeros(), g.zeros())
    s = State(0.0, g.constant(1.0), g.zeros(1))
    with pytest.raises(ValueError):
        s.rho[0] = 2.0


def test_params_and_stepper_validation():
    with pytest.raises(UsageError):
        ModelParams(mu=-1.0)
    with pytest.raises(UsageError):
        ModelParams(eps=0.0)
    with pytest.raises(UsageError):
        StepperConfig(cfl=1.5)
    with pytest.raises(UsageError):
        StepperConfig(viscous_treatment="implicit")


@pytest.mark.parametrize("dim", [1, 2])
def test_stress_divergence_of_constant(dim):
    g = Grid(dim, 16)
    assert np.all(stress_divergence(g, g.constant(0.4, 1), 1.0, 0.5) == 0.0)


def test_stress_divergence_1d_sine():
    g = Grid(1, 64)
    (x,) = g.coords
    out = stress_divergence(g, np.sin(np.pi * x)[None], 1.0, 0.0)
    exact = -(4.0 / 3.0) * np.pi**2 * np.sin(np.pi * x)
    err = np.max(np.abs(out[0] - exact))
    assert err < np.pi**4 * g.dx**2  # second-order truncation bound


def test_stress_divergence_2d_rigid_rotation():
    g = Grid(2, 32)
    x, y = g.coords
    u = np.stack([-y, x])
    out = stress_divergence(g, u, 1.0, 0.7)
    band = (slice(None), slice(2, -2), slice(2, -2))
    assert np.max(np.abs(out[band])) < 1e-12


def test_stress_divergence_2d_analytic():
    g = Grid(2, 64)
    x, y = g.coords
    mu, eta = 0.3, 0.2
    u = np.stack([np.sin(np.pi * x) * np.cos(np.pi * y), np.zeros(g.shape)])
    # mu lap u + (mu/3 + eta) grad div u, worked out by hand
    lam = mu / 3 + eta
    lap = -2 * np.pi**2 * u[0]
    gdx = -np.pi**2 * np.sin(np.pi * x) * np.cos(np.pi * y)
    gdy = -np.pi**2 * np.cos(np.pi * x) * np.sin(np.pi * y)
    exact = np.stack([mu * lap + lam * gdx, lam * gdy])
    assert np.max(np.abs(stress_divergence(g, u, mu, eta) - exact)) < 0.05


@pytest.mark.parametrize("dim", [1, 2])
def test_drift_equilibrium(dim):
    g = Grid(dim, 16)
    s = State(0.0, g.constant(1.0), g.zeros(1))
    drho, dmom = drift_rhs(g, s, ModelParams())
    assert np.all(drho == 0.0) and np.all(dmom == 0.0)
    s = State.from_velocity(0.0, g.constant(1.0), g.constant(0.3, 1))
    drho, dmom = drift_rhs(g, s, ModelParams(mu=0.0))
    assert np.max(np.abs(drho)) < 1e-15 and np.max(np.abs(dmom)) < 1e-14


def test_drift_acoustic_linearisation():
    g = Grid(1, 128)
    (x,) = g.coords
    eps, delta = 0.5, 1e-3
    s = State(0.0, 1.0 + eps * delta * np.sin(np.pi * x), g.zeros(1))
    p = ModelParams(PressureLaw(), mu=0.0, eps=eps)
    _, dmom = drift_rhs(g, s, p)
    lin = -(1 / eps**2) * p.law.dp(1.0) * eps * delta * np.pi * np.cos(np.pi * x)
    assert np.max(np.abs(dmom[0] - lin)) < 1e-3 * np.max(np.abs(lin))


@pytest.mark.parametrize("dim", [1, 2])
def test_drift_is_conservative(dim):
    g = Grid(dim, 16)
    s = smooth_1d(g) if dim == 1 else smooth_2d(g)
    drho, dmom = drift_rhs(g, s, ModelParams(mu=0.2, eta=0.1))
    assert abs(g.integrate(drho)) < 1e-14
    assert np.all(np.abs([g.integrate(c) for c in dmom]) < 1e-13)


def test_drift_floor_breach():
    g = Grid(1, 8)
    rho = g.constant(1.0)
    rho[5] = 1e-10
    with pytest.raises(PositivityError) as exc:
        drift_rhs(g, State(0.25, rho, g.zeros(1)), ModelParams())
    assert exc.value.index == (5,) and exc.value.t == 0.25


def test_cfl_dt_examples():
    g = Grid(1, 64)
    s = State(0.0, g.constant(1.0), g.zeros(1))
    p = ModelParams(PressureLaw(), mu=0.0)
    assert g.dx == 1 / 32
    assert cfl_dt(g, s, p, StepperConfig(cfl=0.4)) == pytest.approx(0.4 * (1 / 32) / math.sqrt(2), rel=1e-14)
    half = cfl_dt(g, s, ModelParams(PressureLaw(), mu=0.0, eps=0.5), StepperConfig(cfl=0.4))
    assert half == pytest.approx(0.5 * 0.4 * (1 / 32) / math.sqrt(2), rel=1e-14)


def test_cfl_dt_viscous_scaling():
    dts, dxs = [], []
    for n in (64, 128, 256):
        g = Grid(1, n)
        s = State(0.0, g.constant(1.0), g.zeros(1))
        dts.append(cfl_dt(g, s, ModelParams(mu=10.0), StepperConfig()))
        dxs.append(g.dx)
    slope = np.polyfit(np.log(dxs), np.log(dts), 1)[0]
    assert slope == pytest.approx(2.0, abs=1e-6)
    g = Grid(1, 64)
    s = State(0.0, g.constant(1.0), g.zeros(1))
    assert cfl_dt(g, s, ModelParams(mu=10.0), StepperConfig(viscous_treatment="semi_implicit")) > dts[0]


def test_em_step_equilibrium():
    g = Grid(2, 16)
    s = State(0.0, g.constant(1.0), g.zeros(1))
    new = em_step(g, s, ModelParams(), StepperConfig(), np.zeros(8), 1e-3)
    assert new.t == 1e-3
    assert np.array_equal(new.rho, s.rho) and np.array_equal(new.mom, s.mom)


def _l2(g, a, b):
    return math.sqrt(g.integrate((a.rho - b.rho) ** 2) + g.integrate(np.sum((a.mom - b.mom) ** 2, axis=0)))


def test_em_step_deterministic_self_convergence():
    g = Grid(1, 64)
    init = smooth_1d(g, 0.2)
    params = ModelParams(mu=0.05, noise=NoiseModel.zero(0))
    cfg = StepperConfig()
    dt0, T = 4e-3, 0.2
    finals = [_run(g, init, params, cfg, dt0 / 2**j, T).final for j in range(3)]
    e1, e2 = _l2(g, finals[0], finals[1]), _l2(g, finals[1], finals[2])
    assert math.log2(e1 / e2) >= 0.9


def test_em_step_pathwise_convergence_with_noise():
    g = Grid(1, 64)
    init = smooth_1d(g, 0.2)
    params = ModelParams(mu=0.05, noise=NoiseModel((0.3, 0.2), (0.0, 0.0)))
    cfg = StepperConfig()
    # the reference step is 1/16 of the finest tested step
    h, T = 2.5e-5, 0.2
    n_fine = step_count(T, h)
    incs = WienerPath(5, 0, h, 2).block(0, n_fine)

    def run(factor):
        s = init
        coarse = incs.reshape(-1, factor, 2).sum(axis=1)
        for dW in coarse:
            s = em_step(g, s, params, cfg, dW, factor * h)
        return s

    ref = run(1)
    factors = [64, 32, 16]
    errs = [_l2(g, run(f), ref) for f in factors]
    order = np.polyfit(np.log(factors), np.log(errs), 1)[0]
    assert 0.7 <= order <= 1.1


@pytest.mark.parametrize("dim", [1, 2])
def test_mass_conserved_with_noise(dim):
    g = Grid(dim, 32 if dim == 1 else 16)
    init = smooth_1d(g) if dim == 1 else smooth_2d(g)
    params = ModelParams(mu=0.1, noise=NoiseModel((0.2, 0.1), (0.1, 0.05)))
    res = _run(g, init, params, StepperConfig(), 1e-3, 0.1, seed=3)
    m0 = res.ledger[0].mass
    assert all(abs(r.mass - m0) <= 1e-12 * m0 for r in res.ledger)


def test_momentum_conserved_without_noise():
    g = Grid(2, 16)
    init = smooth_2d(g, 0.2)
    params = ModelParams(mu=0.1, noise=NoiseModel.zero(0))
    final = _run(g, init, params, StepperConfig(), 1e-3, 0.1).final
    for i in range(2):
        assert abs(g.integrate(final.mom[i]) - g.integrate(init.mom[i])) < 1e-12 * g.integrate(init.rho)


def test_semi_implicit_is_conservative_and_consistent():
    g = Grid(1, 64)
    init = smooth_1d(g, 0.2)
    params = ModelParams(mu=0.1, noise=NoiseModel.zero(0))
    imp = StepperConfig(viscous_treatment="semi_implicit")
    a = _run(g, init, params, imp, 5e-4, 0.1).final
    b = _run(g, init, params, StepperConfig(), 5e-4, 0.1).final
    assert abs(g.integrate(a.rho) - g.integrate(init.rho)) < 1e-12
    assert abs(g.integrate(a.mom[0]) - g.integrate(init.mom[0])) < 1e-12
    assert _l2(g, a, b) < 1e-3


def test_positivity_breach_is_an_error():
    g = Grid(1, 16)
    mom = g.zeros(1)
    mom[0, 2], mom[0, 4] = -5.0, 5.0  # flow leaving cell 3
    s = State(0.0, g.constant(1.0), mom)
    with pytest.raises(PositivityError) as exc:
        em_step(g, s, ModelParams(mu=0.0), StepperConfig(), np.zeros(8), 0.05, step=7)
    assert exc.value.index == (3,) and exc.value.step == 7


def test_nonfinite_is_divergence_error():
    g = Grid(1, 16)
    s = smooth_1d(g)
    with pytest.raises(DivergenceError):
        em_step(g, s, ModelParams(), StepperConfig(), np.zeros(8), float("inf"))


def test_run_trajectory_t_end_zero():
    g = Grid(1, 16)
    init = smooth_1d(g)
    res = _run(g, init, ModelParams(), StepperConfig(), 1e-3, 0.0)
    assert res.final is init and res.ledger == []


def test_run_trajectory_is_bitwise_deterministic():
    g = Grid(1, 32)
    init = smooth_1d(g)
    params = ModelParams(noise=NoiseModel((0.2, 0.1), (0.1, 0.0)))
    a = _run(g, init, params, StepperConfig(), 1e-3, 0.05, seed=9, member=2)
    b = _run(g, init, params, StepperConfig(), 1e-3, 0.05, seed=9, member=2)
    assert a.final.identical(b.final)
    assert a.increments_digest == b.increments_digest
    c = _run(g, init, params, StepperConfig(), 1e-3, 0.05, seed=9, member=3)
    assert not a.final.identical(c.final)


def test_run_trajectory_ledger_rows():
    g = Grid(1, 16)
    init = smooth_1d(g)
    path = WienerPath(0, 0, 1e-3, 8)
    res = run_trajectory(g, init, ModelParams(), StepperConfig(), path, 0.01, ledger_every=3)
    assert [round(r.t, 12) for r in res.ledger] == [0.0, 0.003, 0.006, 0.009, 0.01]
    with pytest.raises(UsageError):
        run_trajectory(g, init, ModelParams(), StepperConfig(), path, 0.0105)
    with pytest.raises(UsageError):
        run_trajectory(g, init, ModelParams(), StepperConfig(), WienerPath(0, 0, 1e-3, 2), 0.01)


def test_deterministic_energy_dissipates():
    g = Grid(1, 64)
    init = smooth_1d(g, 0.2)
    params = ModelParams(mu=0.1, noise=NoiseModel.zero(0))
    dt = choose_dt(g, init, params, StepperConfig(), 0.2)
    res = _run(g, init, params, StepperConfig(), dt, 0.2)
    totals = np.array([r.total for r in res.ledger])
    tol = (dt + g.dx**2) * 0.2
    assert np.all(np.diff(totals) <= tol)
    assert all(energy_residual(res.ledger, 0, j) <= tol for j in range(len(res.ledger)))


def test_choose_dt_divides_t_end():
    g = Grid(1, 32)
    init = smooth_1d(g)
    dt = choose_dt(g, init, ModelParams(), StepperConfig(), 0.5)
    assert dt <= cfl_dt(g, init, ModelParams(), StepperConfig())
    assert step_count(0.5, dt) * dt == pytest.approx(0.5)


def test_failure_writes_checkpoint(tmp_path):
    g = Grid(1, 16)
    init = smooth_1d(g, 0.3)
    params = ModelParams(mu=0.1, noise=NoiseModel((500.0,), (0.0,)))
    path = WienerPath(1, 0, 1e-3, 1)
    with pytest.raises(PositivityError) as exc:
        run_trajectory(g, init, params, StepperConfig(), path, 0.5, checkpoint=tmp_path / "last_good")
    err = exc.value
    assert err.step is not None and err.last_good is not None
    grid2, state, meta = read_checkpoint(tmp_path / "last_good")
    assert grid2 == g and state.identical(err.last_good)
    assert meta["seed"] == 1 and meta["step"] == err.step
    assert np.all(state.rho >= StepperConfig().rho_floor)
