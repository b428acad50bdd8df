import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad, solve_ivp

from trafficfluid.controllers import prcc_q
from trafficfluid.fleet import DomainError
from trafficfluid.macro import (CflError, ConstraintError, Grid, MacroField, Profile,
                                SpeedTransformShape, from_transformed, map_micro_to_macro,
                                micro_macro_compare, ncc_pde_step, pde_step, place_platoon,
                                prcc_pde_step, run_pde, speed_transform_g, speed_transform_inverse,
                                stable_dt, to_transformed, transformed_pde_step)
from trafficfluid.microsim import LongitudinalParams
from trafficfluid.potentials import CubicCutoffPotential, Linear, QuadraticKernel, SmoothRelu

from conftest import ROAD

VM, VS = 35.0, 30.0
L, LAM = 5.59, 10.0


def params(m=1.0, q1=1e-3, q2=1e-4, z=0.0, g=Linear(1.0), **kw):
    return map_micro_to_macro(CubicCutoffPotential(q1), QuadraticKernel(q2), m, L, LAM, "PRCC",
                              v_max=VM, v_star=VS, f=Linear(1 / 35 ** 2), g=g, z=z, **kw)


def bump_field(prm, cells=200, amp=0.04, v=None, boundary="periodic"):
    grid = Grid(0.0, 100.0, cells, boundary)
    x = grid.centers
    rho = 0.08 + amp * np.exp(-((x - 50.0) / 8.0) ** 2)
    vv = np.full(cells, VS) if v is None else v(x)
    return MacroField(grid, rho, vv)


# -- mapping -------------------------------------------------------------------------

def test_density_scales():
    prm = params()
    assert prm.rho_max == pytest.approx(0.178890876565295, rel=1e-14)
    assert prm.rho_bar == pytest.approx(0.1, rel=1e-14)


@pytest.mark.parametrize("z", [0.0, 2.5])
def test_pressure_and_viscosity_vanish_below_interaction_density(z):
    prm = params(z=z)
    rho = np.linspace(1e-4, prm.rho_bar, 500)
    assert np.all(prm.P(rho) == z)
    assert np.all(prm.mu(rho) == 0.0)


def test_pressure_blows_up_at_jam_density():
    prm = params()
    assert prm.P(np.array([prm.rho_max * (1 - 1e-6)]))[0] > 1e3
    rho = np.linspace(prm.rho_bar, prm.rho_max * (1 - 1e-6), 400)
    assert np.all(np.diff(prm.P(rho)) >= 0)
    assert np.all(prm.mu(rho) >= 0)


def test_pressure_follows_potential_slope():
    m = 2.0
    prm = params(m=m)
    rho = np.array([0.25, 0.3])
    _, dphi = CubicCutoffPotential(1e-3)(m / rho, L, LAM)
    assert np.array_equal(prm.P(rho), -m * dphi)
    Kv, _ = QuadraticKernel(1e-4)(m / rho, L, LAM)
    assert np.allclose(prm.mu(rho), m * m / rho * Kv, rtol=1e-15)


class BumpKernel:
    """Non-negative kernel with an interior maximum at the midpoint of (L, lam)."""

    def __call__(self, d, L_, lam):
        d = np.asarray(d, dtype=float)
        mid = 0.5 * (L_ + lam)
        inside = d < lam
        val = np.where(inside, np.exp(-((d - mid) / 0.8) ** 2) * (lam - np.minimum(d, lam)) ** 2, 0.0)
        return val, np.zeros_like(d)


def test_non_monotone_kernel_gives_viscosity_extremum():
    prm = map_micro_to_macro(CubicCutoffPotential(1e-3), BumpKernel(), 1.0, L, LAM, "NCC",
                             v_max=VM, v_star=VS)
    rho = np.linspace(prm.rho_bar * 1.0001, prm.rho_max * 0.9999, 4001)
    mu = prm.mu(rho)
    slope = np.sign(np.diff(mu))
    turns = np.nonzero(slope[1:] != slope[:-1])[0]
    assert turns.size >= 1
    k = turns[0] + 1
    assert 0 < k < rho.size - 1
    assert mu[k] >= mu[k - 1] and mu[k] >= mu[k + 1]


@pytest.mark.parametrize("bad", [
    dict(lam=5.0),
    dict(K=lambda d, L_, lam: (np.where(np.asarray(d) < lam, -1.0, 0.0), np.zeros_like(d))),
    dict(Phi=lambda d, L_, lam: (np.zeros_like(np.asarray(d, float)), np.zeros_like(np.asarray(d, float)))),
])
def test_mapping_rejects_invalid_shapes(bad):
    args = dict(Phi=CubicCutoffPotential(1e-3), K=QuadraticKernel(1e-4), m=1.0, L=L, lam=LAM)
    args.update(bad)
    with pytest.raises(ValueError):
        map_micro_to_macro(args["Phi"], args["K"], args["m"], args["L"], args["lam"], "PRCC",
                           v_max=VM, v_star=VS)


def test_mapping_rejects_unknown_family():
    with pytest.raises(ValueError):
        map_micro_to_macro(CubicCutoffPotential(1e-3), QuadraticKernel(0.0), 1.0, L, LAM, "ACC",
                           v_max=VM, v_star=VS)


def test_relaxation_speed_weight_matches_controller():
    v = np.linspace(0.5, 34.5, 200)
    assert np.array_equal(params().q(v), prcc_q(v, 0.0, ROAD))


# -- speed transform --------------------------------------------------------------------

def test_transform_vanishes_at_set_point():
    assert speed_transform_g(VS, VS, VM) == 0.0


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 34.99), st.floats(0.01, 34.99))
def test_transform_strictly_increasing(a, b):
    if a == b:
        return
    lo, hi = min(a, b), max(a, b)
    assert speed_transform_g(lo, VS, VM) < speed_transform_g(hi, VS, VM)


def test_transform_matches_quadrature():
    for v in np.linspace(0.4, 34.6, 35):
        expected, _ = quad(lambda s: prcc_q(s, 0.0, ROAD), VS, v, epsabs=1e-13, epsrel=1e-12, limit=200)
        assert speed_transform_g(v, VS, VM) == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_transform_round_trip():
    rng = np.random.default_rng(7)
    v = np.concatenate([rng.uniform(0.01 * VM, 0.99 * VM, 1000), np.linspace(0.01 * VM, 0.99 * VM, 1000)])
    back = speed_transform_inverse(speed_transform_g(v, VS, VM), VS, VM)
    assert np.max(np.abs(back - v)) < 1e-9


def test_transform_domain():
    for v in (0.0, VM, -1.0, 40.0):
        with pytest.raises(DomainError):
            speed_transform_g(v, VS, VM)


def test_transform_shape_derivative_is_q():
    shape = SpeedTransformShape(VS, VM)
    v = np.linspace(1.0, 34.0, 50)
    val, der = shape(v)
    assert np.array_equal(val, speed_transform_g(v, VS, VM))
    assert np.array_equal(der, prcc_q(v, 0.0, ROAD))


# -- solvers ------------------------------------------------------------------------------

STEPPERS = {"PRCC": prcc_pde_step, "NCC": ncc_pde_step}


@pytest.mark.parametrize("family", ["PRCC", "NCC"])
@pytest.mark.parametrize("rho0", [0.02, 0.1])
def test_equilibrium_is_fixed_point(family, rho0):
    prm = params()
    grid = Grid(0.0, 100.0, 200)
    fld = MacroField(grid, np.full(200, rho0), np.full(200, VS))
    out = STEPPERS[family](fld, prm, stable_dt(fld, prm, family))
    assert np.max(np.abs(out.rho - fld.rho)) <= 1e-14
    assert np.max(np.abs(out.v - fld.v)) <= 1e-14


def test_transformed_equilibrium_is_fixed_point():
    prm = params()
    grid = Grid(0.0, 100.0, 200)
    fld = MacroField(grid, np.full(200, 0.07), np.full(200, VS))
    tf = to_transformed(fld, prm)
    assert np.all(tf.w == 0.0)
    out = transformed_pde_step(tf, prm, stable_dt(fld, prm, "PRCC"))
    assert np.max(np.abs(out.w)) <= 1e-14 and np.max(np.abs(out.rho - tf.rho)) <= 1e-14


@pytest.mark.parametrize("family", ["PRCC", "NCC"])
def test_mass_conserved_over_many_steps(family):
    prm = params()
    fld = bump_field(prm, v=lambda x: VS - 2.0 * np.sin(2 * np.pi * x / 100.0))
    m0 = fld.mass()
    dt = 0.9 * stable_dt(fld, prm, family)
    cur = fld
    worst = 0.0
    for _ in range(10_000):
        nxt = pde_step(cur, prm, dt, family)
        worst = max(worst, abs(nxt.mass() - cur.mass()) / cur.mass())
        cur = nxt
    assert abs(cur.mass() - m0) / m0 < 1e-10
    assert worst < 1e-12


def test_transformed_mass_conserved():
    prm = params(g=SpeedTransformShape(VS, VM))
    tf = to_transformed(bump_field(prm), prm)
    dt = 0.5 * stable_dt(from_transformed(tf, prm), prm, "PRCC")
    m0 = tf.rho.sum()
    for _ in range(200):
        tf = transformed_pde_step(tf, prm, dt)
    assert abs(tf.rho.sum() - m0) / m0 < 1e-12


def test_uniform_prcc_relaxation_matches_scalar_ode():
    prm = params()
    grid = Grid(0.0, 100.0, 50)
    f1 = 1 / 35 ** 2
    sol = solve_ivp(lambda t, v: -f1 * (v - VS) / prcc_q(v, 0.0, ROAD), (0, 2.0), [22.0],
                    method="DOP853", rtol=1e-12, atol=1e-12)
    errs = []
    for dt in (2e-3, 1e-3):
        cur = MacroField(grid, np.full(50, 0.05), np.full(50, 22.0))
        for _ in range(int(round(2.0 / dt))):
            cur = prcc_pde_step(cur, prm, dt)
        assert np.ptp(cur.v) == 0.0 and np.ptp(cur.rho) == 0.0
        errs.append(abs(cur.v[0] - sol.y[0, -1]))
    # explicit Euler: the global error halves with the step
    assert errs[1] < 1e-3
    assert 1.8 <= errs[0] / errs[1] <= 2.2


def test_uniform_prcc_single_step_is_second_order():
    prm = params()
    grid = Grid(0.0, 100.0, 10)
    f1 = 1 / 35 ** 2
    rate = lambda t, v: -f1 * (v - VS) / prcc_q(v, 0.0, ROAD)
    errs = []
    for dt in (2e-2, 1e-2):
        out = prcc_pde_step(MacroField(grid, np.full(10, 0.05), np.full(10, 22.0)), prm, dt)
        ref = solve_ivp(rate, (0, dt), [22.0], method="DOP853", rtol=1e-13, atol=1e-13).y[0, -1]
        errs.append(abs(out.v[0] - ref))
    assert 3.5 <= errs[0] / errs[1] <= 4.5


def test_newtonian_relaxation_gain():
    prm = map_micro_to_macro(CubicCutoffPotential(1e-3), QuadraticKernel(1e-4), 1.0, L, LAM, "NCC",
                             v_max=VM, v_star=VS, gamma=1 / 35, r=SmoothRelu(0.2))
    assert prm.h(0.0) == pytest.approx(35 * 0.1 / 150, rel=1e-14)
    assert prm.h(0.0) == pytest.approx(0.0233333333333, rel=1e-11)
    grid = Grid(0.0, 100.0, 20)
    cur = MacroField(grid, np.full(20, 0.05), np.full(20, 25.0))
    dt, steps = 1e-2, 500
    for _ in range(steps):
        cur = ncc_pde_step(cur, prm, dt)
    k = 1 / 35 + prm.h(0.0)
    assert cur.v[0] - VS == pytest.approx(-5.0 * (1 - k * dt) ** steps, rel=1e-12)
    assert cur.v[0] - VS == pytest.approx(-5.0 * np.exp(-k * dt * steps), rel=1e-3)


def test_step_rejects_large_dt():
    prm = params()
    fld = bump_field(prm)
    with pytest.raises(CflError):
        prcc_pde_step(fld, prm, 1.01 * stable_dt(fld, prm, "PRCC") / 0.4)


def test_step_reports_offending_cell():
    prm = params()
    fld = bump_field(prm)
    fld.rho[17] = prm.rho_max
    with pytest.raises(ConstraintError) as err:
        ncc_pde_step(fld, prm, 1e-4)
    assert err.value.cell == 17
    fld = bump_field(prm)
    fld.v[3] = VM
    with pytest.raises(ConstraintError) as err:
        prcc_pde_step(fld, prm, 1e-4)
    assert err.value.cell == 3


def test_stable_dt_includes_viscous_limit():
    stiff = params(q2=50.0)
    soft = params(q2=0.0)
    fld = bump_field(soft, cells=400)
    assert stable_dt(fld, stiff, "NCC") < stable_dt(fld, soft, "NCC")


def test_inflow_boundary_holds_uniform_state():
    prm = params()
    grid = Grid(0.0, 50.0, 100, "inflow")
    fld = MacroField(grid, np.full(100, 0.12), np.full(100, VS))
    out, _ = run_pde(fld, prm, "PRCC", 0.5)
    assert np.allclose(out.rho, 0.12, rtol=0, atol=1e-14) and np.allclose(out.v, VS, rtol=0, atol=1e-13)


def test_run_pde_hits_snapshot_times():
    prm = params()
    fld = bump_field(prm)
    final, snaps = run_pde(fld, prm, "PRCC", 0.3, snapshot_times=(0.0, 0.1, 0.2))
    assert sorted(snaps) == [0.0, 0.1, 0.2, 0.3]
    assert np.array_equal(snaps[0.3].rho, final.rho)
    assert np.array_equal(snaps[0.0].rho, fld.rho)


def test_transformed_form_consistent_per_step():
    prm = params(g=SpeedTransformShape(VS, VM))
    fld = bump_field(prm, cells=100, v=lambda x: VS + 2.0 * np.exp(-((x - 50.0) / 10.0) ** 2))
    dt0 = 0.5 * stable_dt(fld, prm, "PRCC")
    gaps = []
    for dt in (dt0, dt0 / 2):
        a = prcc_pde_step(fld, prm, dt)
        b = from_transformed(transformed_pde_step(to_transformed(fld, prm), prm, dt), prm)
        gaps.append(max(np.max(np.abs(a.v - b.v)), np.max(np.abs(a.rho - b.rho))))
    assert gaps[0] > 0
    assert 3.0 <= gaps[0] / gaps[1] <= 5.0


# -- comparison harness ---------------------------------------------------------------------

def test_platoon_sampling_constant_density():
    prof = Profile(lambda x: np.full_like(x, 0.05), lambda x: np.full_like(x, VS), 0.0, 100.0)
    x = place_platoon(prof, 40, 2.0)
    assert x[0] == 100.0
    assert np.allclose(-np.diff(x), 2.0 / (40 * 0.05), rtol=1e-14)


def test_platoon_sampling_tracks_profile():
    rho0 = lambda x: 0.05 + 0.02 * np.sin(x / 20.0)
    prof = Profile(rho0, lambda x: np.full_like(x, VS), 0.0, 100.0)
    n, m = 400, 5.0
    x = place_platoon(prof, n, m)
    mid = 0.5 * (x[:-1] + x[1:])
    dens = m / (n * -np.diff(x))
    assert np.max(np.abs(dens - rho0(mid))) < 1e-4


def test_constant_equilibrium_profile_has_no_error():
    prm = LongitudinalParams(L=L, lam=LAM, v_max=VM, v_star=VS, Phi=CubicCutoffPotential(1e-3),
                             K=QuadraticKernel(1e-4), f=Linear(1 / 35 ** 2), gamma=1 / 35)
    prof = Profile(lambda x: np.full_like(x, 0.08), lambda x: np.full_like(x, VS), 0.0, 60.0)
    for family in ("PRCC", "NCC"):
        rows = micro_macro_compare([20, 40], prm, 1.0, family, prof, times=(0.5,), cells=200,
                                   micro_dt=1e-3)
        assert len(rows) == 2
        for r in rows:
            assert r.l2_rho < 1e-9 and r.linf_rho < 1e-9
            assert r.l2_v < 1e-9 and r.linf_v < 1e-9
