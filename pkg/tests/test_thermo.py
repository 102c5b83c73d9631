import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relent.cns import State
from relent.errors import PositivityError, ReferencePositivityError, UsageError, VacuumError
from relent.grid import Grid
from relent.thermo import (
    EssResSplit,
    PressureLaw,
    bregman,
    bregman_ratio,
    coercivity_constant,
    ess_res_split,
    pressure,
    pressure_potential,
    relative_energy,
)


def _H_quad(rho, gamma, a):
    # rho * int_0^rho p(z)/z^2 dz by adaptive quadrature
    with mpmath.workdps(30):
        val = rho * mpmath.quad(lambda z: a * z ** (gamma - 2), [0, rho])
    return float(val)


def test_gamma_bound():
    with pytest.raises(UsageError, match="gamma > 3/2"):
        PressureLaw(1.2)
    assert PressureLaw(1.2, relax_gamma=True).gamma == 1.2
    with pytest.raises(UsageError):
        PressureLaw(1.0, relax_gamma=True)
    with pytest.raises(UsageError):
        PressureLaw(2.0, a=0.0)


def test_pressure_examples():
    law = PressureLaw()
    assert pressure(np.zeros(4), law).tolist() == [0.0] * 4
    assert pressure(np.array([3.0]), law)[0] == 9.0
    rho = np.linspace(0.0, 5.0, 101)
    assert np.all(np.diff(pressure(rho, law)) > 0)
    assert law.p_infinity == 2.0


def test_pressure_negative_density_reports_cell():
    with pytest.raises(PositivityError) as exc:
        pressure(np.array([1.0, 0.5, -0.1, 2.0]), PressureLaw())
    assert exc.value.index == (2,)


@pytest.mark.parametrize(
    "gamma,rho,expected",
    [(2.0, 0.0, 0.0), (2.0, 2.0, 4.0), (5.0 / 3.0, 1.0, 1.5)],
)
def test_pressure_potential_examples(gamma, rho, expected):
    law = PressureLaw(gamma)
    assert pressure_potential(np.array(rho), law) == pytest.approx(expected, rel=1e-14, abs=1e-300)
    if rho > 0:
        assert _H_quad(rho, gamma, 1.0) == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("gamma", [5.0 / 3.0, 2.0, 3.0])
@pytest.mark.parametrize("rho", [1e-3, 0.37, 1.0, 12.5, 1e3])
def test_pressure_potential_matches_quadrature(gamma, rho):
    law = PressureLaw(gamma, a=1.3)
    assert float(pressure_potential(np.array(rho), law)) == pytest.approx(_H_quad(rho, gamma, 1.3), rel=1e-10)


@pytest.mark.parametrize("gamma", [5.0 / 3.0, 2.0, 3.0])
def test_potential_derivatives_match_mpmath(gamma):
    law = PressureLaw(gamma, a=0.7)
    H = lambda z: 0.7 / (gamma - 1) * z**gamma
    for z in (0.3, 1.0, 2.5):
        assert law.dH(z) == pytest.approx(float(mpmath.diff(H, z, 1)), rel=1e-10)
        assert law.d2H(z) == pytest.approx(float(mpmath.diff(H, z, 2)), rel=1e-10)
        assert law.d3H(z) == pytest.approx(float(mpmath.diff(H, z, 3)), rel=1e-8, abs=1e-12)
        assert law.d2p(z) == pytest.approx(float(mpmath.diff(lambda w: 0.7 * w**gamma, z, 2)), rel=1e-10)
        # rho H''(rho) = p'(rho)
        assert z * law.d2H(z) == pytest.approx(law.dp(z), rel=1e-14)


@settings(max_examples=200, deadline=None)
@given(
    rho=st.floats(1e-6, 1e3),
    r=st.floats(1e-3, 1e3),
    gamma=st.sampled_from([1.2, 5.0 / 3.0, 2.0, 3.0]),
)
def test_bregman_nonnegative_and_matches_direct_form(rho, r, gamma):
    law = PressureLaw(gamma, relax_gamma=True)
    b = float(bregman(rho, r, law))
    assert b >= 0.0
    direct = law.H(rho) - law.dH(r) * (rho - r) - law.H(r)
    assert b == pytest.approx(direct, rel=1e-8, abs=1e-9 * (law.H(rho) + law.H(r)))


def test_bregman_ratio_near_diagonal():
    law = PressureLaw()
    assert float(bregman_ratio(1.0 + 1e-6, 1.0, law)) == pytest.approx(1.0, abs=1e-4)
    law = PressureLaw(5.0 / 3.0)
    # H''(r)/2 at r = 2
    assert float(bregman_ratio(2.0 + 1e-6, 2.0, law)) == pytest.approx(law.d2H(2.0) / 2, rel=1e-4)


def _state(grid, rho, u):
    return State.from_velocity(0.0, rho, u)


def test_relative_energy_examples():
    g = Grid(1, 32)
    law = PressureLaw()
    one = g.constant(1.0)
    s = _state(g, one, g.zeros(1))
    assert relative_energy(g, s, 2.0 * one, g.zeros(1), law) == pytest.approx(2.0, rel=1e-14)
    c = 0.7
    s = _state(g, one, g.constant(0.2 + c, 1))
    assert relative_energy(g, s, one, g.constant(0.2, 1), law) == pytest.approx(0.5 * c**2 * 2.0, rel=1e-13)


def test_relative_energy_eps_weight():
    g = Grid(1, 32)
    law = PressureLaw()
    s = _state(g, g.constant(1.0), g.zeros(1))
    assert relative_energy(g, s, g.constant(2.0), g.zeros(1), law, eps=0.5) == pytest.approx(8.0, rel=1e-14)
    with pytest.raises(UsageError):
        relative_energy(g, s, g.constant(2.0), g.zeros(1), law, eps=0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), dim=st.sampled_from([1, 2]))
def test_relative_energy_diagonal_is_zero(seed, dim):
    g = Grid(dim, 16)
    rng = np.random.default_rng(seed)
    rho = 0.2 + rng.random(g.shape) * 3
    u = rng.standard_normal((dim,) + g.shape)
    s = _state(g, rho, u)
    assert abs(relative_energy(g, s, rho, s.velocity(), PressureLaw())) <= 1e-12


def test_relative_energy_zero_means_equal():
    g = Grid(1, 16)
    rng = np.random.default_rng(3)
    rho = 0.5 + rng.random(g.shape)
    u = rng.standard_normal((1,) + g.shape)
    s = _state(g, rho, u)
    r = rho.copy()
    r[4] += 1e-3
    assert relative_energy(g, s, r, u, PressureLaw()) > 0.0
    U = u.copy()
    U[0, 7] += 1e-3
    assert relative_energy(g, s, rho, U, PressureLaw()) > 0.0


def test_relative_energy_vacuum_convention():
    g = Grid(1, 8)
    rho = g.constant(1.0)
    rho[3] = 0.0
    s = State(0.0, rho, g.zeros(1))
    assert relative_energy(g, s, g.constant(1.0), g.zeros(1), PressureLaw()) > 0.0
    mom = g.zeros(1)
    mom[0, 3] = 0.5
    with pytest.raises(VacuumError):
        relative_energy(g, State(0.0, rho, mom), g.constant(1.0), g.zeros(1), PressureLaw())


def test_relative_energy_reference_must_be_positive():
    g = Grid(1, 8)
    s = _state(g, g.constant(1.0), g.zeros(1))
    r = g.constant(1.0)
    r[2] = 0.0
    with pytest.raises(ReferencePositivityError):
        relative_energy(g, s, r, g.zeros(1), PressureLaw())


def test_relative_energy_coercive_on_band():
    g = Grid(1, 32)
    law = PressureLaw(5.0 / 3.0)
    delta = 0.1
    c = coercivity_constant(delta, law)
    rng = np.random.default_rng(11)
    for _ in range(20):
        rho = rng.uniform(delta, 1 / delta, g.shape)
        r = rng.uniform(delta, 1 / delta, g.shape)
        s = _state(g, rho, g.zeros(1))
        assert relative_energy(g, s, r, g.zeros(1), law) >= c * g.integrate((rho - r) ** 2) * (1 - 1e-12)


def test_ess_res_split():
    sp = EssResSplit(0.5, 2.0)
    rho = np.linspace(0.6, 1.9, 50)
    h = np.cos(rho)
    ess, res = ess_res_split(h, rho, sp)
    assert np.all(res == 0.0)
    far = np.concatenate([np.linspace(0.0, 0.39, 20), np.linspace(2.41, 10, 20)])
    ess, res = ess_res_split(np.ones_like(far), far, sp)
    assert np.all(ess == 0.0)
    rng = np.random.default_rng(0)
    rho = rng.uniform(0, 4, 1000)
    h = rng.standard_normal((2, 1000))
    ess, res = ess_res_split(h, rho, sp)
    assert np.array_equal(ess + res, h)
    w = sp.weight(rho)
    assert np.all((w >= 0) & (w <= 1))


def test_ess_res_split_validation():
    with pytest.raises(UsageError):
        EssResSplit(2.0, 1.0)
    with pytest.raises(UsageError):
        ess_res_split(np.ones(3), np.ones(4), EssResSplit(0.5, 2.0))


@pytest.mark.parametrize("delta", [0.1, 0.01])
def test_coercivity_quadratic_band_gamma2(delta):
    assert coercivity_constant(delta, PressureLaw()) == pytest.approx(1.0, abs=1e-10)


@pytest.mark.parametrize("gamma", [5.0 / 3.0, 2.0])
def test_coercivity_residual_gamma_positive(gamma):
    assert coercivity_constant(0.1, PressureLaw(gamma), "residual_gamma") > 0.0


def test_coercivity_quadratic_band_matches_closed_form_bound():
    # the ratio is a weighted mean of H''/2 between rho and r; for gamma < 2
    # H'' decreases, so the infimum is H''(1/delta)/2, approached at the top corner
    law = PressureLaw(5.0 / 3.0)
    c = coercivity_constant(0.1, law, samples=401)
    floor = law.d2H(10.0) / 2
    assert floor <= c <= floor * 1.01


def test_coercivity_validation():
    with pytest.raises(UsageError):
        coercivity_constant(1.5, PressureLaw())
    with pytest.raises(UsageError):
        coercivity_constant(0.1, PressureLaw(), "nope")
