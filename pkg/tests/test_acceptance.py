"""End-to-end acceptance checks, one test per criterion.

Each test prints a ``criterion N PASS|FAIL`` line (also repeated in the
terminal summary) before asserting. The fleet runs are shared through a
session fixture: four controller variants, twenty seeds, 300 s each.
"""

import math
import time

import numpy as np
import pytest

from trafficfluid.controllers import ncc_terms
from trafficfluid.energy import (ClfParams, dissipation_delta, dissipation_gamma, eval_H, eval_H_R,
                                 grad_H, grad_H_R, size_bounds)
from trafficfluid.macro import (Grid, MacroField, SpeedTransformShape, from_transformed,
                                map_micro_to_macro, micro_macro_compare, pde_step,
                                prcc_pde_step, stable_dt, to_transformed, transformed_pde_step)
from trafficfluid.microsim import IntegratorConfig, closed_loop_rhs, reference_loop, simulate
from trafficfluid.potentials import CubicCutoffPotential, Linear, QuadraticKernel
from trafficfluid.scenario import load_scenario

from conftest import ROAD, random_admissible

pytestmark = pytest.mark.slow

VARIANTS = ("fig1_ncc_inviscid", "fig1_ncc_viscous", "fig1_prcc_inviscid", "fig1_prcc_viscous")
SEEDS = range(20)
T_END = 300.0
RECORD_EVERY = 100          # one sample per 0.1 s
CLF = ClfParams()


class Run:
    def __init__(self, scen, traj, wall):
        self.scen, self.traj, self.wall = scen, traj, wall

    def at(self, t):
        return int(np.argmin(np.abs(self.traj.times - t)))


@pytest.fixture(scope="session")
def fleet_runs():
    runs = {}
    for name in VARIANTS:
        for seed in SEEDS:
            scen = load_scenario(name, seed=seed)
            cfg = IntegratorConfig(dt=1e-3, t_end=T_END, record_every=RECORD_EVERY)
            t0 = time.perf_counter()
            traj = simulate(scen.loop, scen.initial, cfg)
            runs[name, seed] = Run(scen, traj, time.perf_counter() - t0)
    return runs


def sample_violations(run: Run) -> list:
    """Constraint violations at any recorded sample, checked directly on the arrays."""
    w = run.traj.states
    n = run.traj.n
    road, pairs = run.scen.road, run.scen.pairs
    x, y, th, v = w[:, :n], w[:, n:2 * n], w[:, 2 * n:3 * n], w[:, 3 * n:]
    bad = []
    if not np.all(np.abs(y) < road.half_width):
        bad.append("lateral")
    if not np.all(np.abs(th) < road.phi):
        bad.append("heading")
    if not np.all((v > 0) & (v < road.v_max)):
        bad.append("speed")
    dx = x[:, :, None] - x[:, None, :]
    dy = y[:, :, None] - y[:, None, :]
    d = np.sqrt(dx * dx + pairs.p[None] * dy * dy)
    iu = np.triu_indices(n, 1)
    if not np.all(d[:, iu[0], iu[1]] - pairs.L[iu] > 0):
        bad.append("separation")
    return bad


def test_criterion_01_safety(fleet_runs, verdict):
    failures = []
    for key, run in fleet_runs.items():
        if run.traj.events:
            failures.append(f"{key}: {len(run.traj.events)} guard events")
        if abs(run.traj.times[-1] - T_END) > 1e-9:
            failures.append(f"{key}: stopped at {run.traj.times[-1]}")
        bad = sample_violations(run)
        if bad:
            failures.append(f"{key}: {bad}")
    slowest = max(r.wall for r in fleet_runs.values())
    if slowest > 180.0:
        failures.append(f"slowest run {slowest:.1f} s")
    verdict(1, "safety over 4 variants x 20 seeds", not failures,
            f"{len(fleet_runs)} runs, slowest {slowest:.1f} s" + (f"; {failures[:3]}" if failures else ""))
    assert not failures


def test_criterion_02_energy_monotone(fleet_runs, verdict):
    worst = -math.inf
    for run in fleet_runs.values():
        e = run.traj.clf
        worst = max(worst, float(np.max(np.diff(e)) / max(1.0, e[0])))
    ok = worst <= 1e-8
    verdict(2, "H_R (PRCC) and H (NCC) non-increasing", ok, f"largest scaled rise {worst:.3g}")
    assert ok


RANDOM_STATES = 10_000
SMALL_N = 6


def random_states(family, seed):
    """Yield ``(loop, state)`` pairs alternating the inviscid and viscous variants."""
    rng = np.random.default_rng(seed)
    loops = [reference_loop(family, visc, n=SMALL_N) for visc in (False, True)]
    for k in range(RANDOM_STATES):
        loop = loops[k % 2]
        yield loop, random_admissible(rng, SMALL_N, pairs=loop.pairs, x_span=9.0, y_frac=0.95,
                                      th_frac=0.95, v_lo=0.03, v_hi=0.97)


def test_criterion_03_dissipation_identity(verdict):
    worst_prcc = 0.0
    for loop, s in random_states("PRCC", 31):
        rate = float(grad_H_R(s, loop.suite, CLF, ROAD, loop.pairs) @ closed_loop_rhs(s, loop))
        delta = dissipation_delta(s, loop.suite, CLF, ROAD, loop.pairs)
        worst_prcc = max(worst_prcc, abs(rate + delta) / delta)
    worst_ncc = -math.inf
    for loop, s in random_states("NCC", 32):
        rate = float(grad_H(s, loop.suite, CLF, ROAD, loop.pairs) @ closed_loop_rhs(s, loop))
        gam = dissipation_gamma(s, loop.suite, CLF, ROAD, loop.pairs, loop.gains.mu1, loop.gains.mu2)
        worst_ncc = max(worst_ncc, (rate + gam) / max(1.0, abs(rate), gam))
    ok = worst_prcc < 1e-8 and worst_ncc <= 1e-8
    verdict(3, "pointwise dissipation identity and inequality", ok,
            f"PRCC max rel err {worst_prcc:.2g}; NCC max scaled (rate + Gamma) {worst_ncc:.2g}")
    assert ok


def test_criterion_04_convergence(fleet_runs, verdict):
    worst = {"speed": 0.0, "heading": 0.0, "u": 0.0, "F": 0.0}
    for run in fleet_runs.values():
        last = run.traj.state(len(run.traj.times) - 1)
        worst["speed"] = max(worst["speed"], float(np.max(np.abs(last.v - ROAD.v_star))))
        worst["heading"] = max(worst["heading"], float(np.max(np.abs(last.theta))))
        worst["u"] = max(worst["u"], float(np.max(np.abs(run.traj.u[-1]))))
        worst["F"] = max(worst["F"], float(np.max(np.abs(run.traj.F[-1]))))
    ok = (worst["speed"] < 1e-2 * ROAD.v_max and worst["heading"] < 1e-2
          and worst["u"] < 1e-2 and worst["F"] < 1e-2)
    verdict(4, "convergence at t = 300 s", ok, ", ".join(f"max |{k}| {v:.3g}" for k, v in worst.items()))
    assert ok


def test_criterion_05_viscous_faster(fleet_runs, verdict):
    details, ok = [], True
    for family in ("ncc", "prcc"):
        wins, ratios = 0, []
        for seed in SEEDS:
            visc = fleet_runs[f"fig1_{family}_viscous", seed]
            invisc = fleet_runs[f"fig1_{family}_inviscid", seed]
            wins += visc.traj.H[-1] <= invisc.traj.H[-1]
            k = visc.at(50.0)
            ratios.append(visc.traj.H[k] / invisc.traj.H[invisc.at(50.0)])
        median = float(np.median(ratios))
        fam_ok = wins >= 18 and median < 1.0
        ok &= fam_ok
        details.append(f"{family.upper()}: {wins}/20 seeds, median ratio at 50 s {median:.3g}")
    verdict(5, "viscous H(t_end) <= inviscid H(t_end)", ok, "; ".join(details))
    assert ok


def _fd_gradient(energy, state, h=1e-6):
    w = state.as_vector()
    g = np.empty_like(w)
    for k in range(w.size):
        step = h * max(1.0, abs(w[k]))
        up, dn = w.copy(), w.copy()
        up[k] += step
        dn[k] -= step
        g[k] = (energy(type(state).from_vector(up)) - energy(type(state).from_vector(dn))) / (2 * step)
    return g


def test_criterion_06_gradients(verdict):
    rng = np.random.default_rng(61)
    worst = 0.0
    for k in range(100):
        loop = reference_loop(("NCC", "PRCC")[k % 2], bool(k // 2 % 2), n=4)
        s = random_admissible(rng, 4, pairs=loop.pairs, x_span=9.0, y_frac=0.9, th_frac=0.9,
                              v_lo=0.1, v_hi=0.9)
        for energy, grad in ((eval_H, grad_H), (eval_H_R, grad_H_R)):
            g = grad(s, loop.suite, CLF, ROAD, loop.pairs)
            num = _fd_gradient(lambda q: energy(q, loop.suite, CLF, ROAD, loop.pairs), s)
            worst = max(worst, float(np.max(np.abs(g - num)) / np.max(np.abs(g))))
    ok = worst < 1e-5
    verdict(6, "analytic gradients vs central differences", ok, f"max rel err {worst:.2g}")
    assert ok


def test_criterion_07_size_bounds(fleet_runs, verdict):
    failures = []
    for (name, seed), run in fleet_runs.items():
        if "prcc" not in name:
            continue
        loop = run.scen.loop
        sb = size_bounds(run.traj.H_R[0], loop.suite, loop.clf, ROAD, loop.pairs)
        n = run.traj.n
        w = run.traj.states
        v, th = w[:, 3 * n:], w[:, 2 * n:3 * n]
        if not np.all((v >= sb.ell1) & (v <= sb.ell2)):
            failures.append(f"{name}/{seed}: speed")
        if not np.all(np.abs(th) <= sb.omega):
            failures.append(f"{name}/{seed}: heading")
        x, y = w[:, :n], w[:, n:2 * n]
        dx = x[:, :, None] - x[:, None, :]
        dy = y[:, :, None] - y[:, None, :]
        d = np.sqrt(dx * dx + loop.pairs.p[None] * dy * dy)
        iu = np.triu_indices(n, 1)
        if not np.all(d[:, iu[0], iu[1]] >= sb.rho_pair[iu]):
            failures.append(f"{name}/{seed}: separation")
    ok = not failures
    verdict(7, "PRCC runs stay inside the size bounds", ok, "; ".join(failures[:3]))
    assert ok


def test_criterion_08_gain_bounds(verdict):
    worst = 0.0
    for loop, s in random_states("NCC", 81):
        t = ncc_terms(s, loop.gains, ROAD, loop.pairs)
        c = np.cos(s.theta)
        scale = np.maximum(1.0, np.abs(t.Lambda)) * 1e-13
        lower_k = loop.gains.mu2 - t.k
        upper = t.Lambda - t.k * ROAD.v_star
        lower = -t.k * (ROAD.v_max * c - ROAD.v_star) - t.Lambda
        worst = max(worst, float(np.max(lower_k / scale)), float(np.max(upper / scale)),
                    float(np.max(lower / scale)))
    ok = worst <= 1.0
    verdict(8, "NCC gain bounds at random states", ok,
            f"largest violation {worst:.3g} x round-off scale")
    assert ok


def macro_params(family, g=Linear(1.0), z=0.0):
    return map_micro_to_macro(CubicCutoffPotential(1e-3), QuadraticKernel(1e-4), 1.0, 5.59, 10.0,
                              family, v_max=35.0, v_star=30.0, f=Linear(1 / 35 ** 2), g=g,
                              gamma=1 / 35, z=z)


def test_criterion_09_macro_solver(verdict):
    grid = Grid(0.0, 100.0, 200)
    x = grid.centers
    details, ok = [], True
    for family in ("PRCC", "NCC"):
        prm = macro_params(family)
        fld = MacroField(grid, 0.08 + 0.04 * np.exp(-((x - 50) / 8) ** 2),
                         30.0 - 2.0 * np.sin(2 * np.pi * x / 100))
        dt = 0.5 * stable_dt(fld, prm, family)
        cur = fld
        for _ in range(10_000):
            cur = pde_step(cur, prm, dt, family)
        drift = abs(cur.mass() - fld.mass()) / fld.mass()
        eq = MacroField(grid, np.full(200, 0.1), np.full(200, 30.0))
        nxt = pde_step(eq, prm, stable_dt(eq, prm, family), family)
        still = max(np.max(np.abs(nxt.rho - eq.rho)), np.max(np.abs(nxt.v - eq.v)))
        ok &= drift < 1e-10 and still <= 1e-14
        details.append(f"{family} drift {drift:.2g}, equilibrium change {still:.2g}")
    for z in (0.0, 1.5):
        prm = macro_params("PRCC", z=z)
        rho = np.linspace(1e-6, prm.rho_bar, 10_000)
        ok &= bool(np.all(prm.P(rho) == z) and np.all(prm.mu(rho) == 0.0))
    verdict(9, "macro conservation, equilibria and mapping", ok, "; ".join(details))
    assert ok


def test_criterion_10_micro_macro(verdict):
    t0 = time.perf_counter()
    details, ok = [], True
    for name in ("compare_bump", "compare_bump_prcc"):
        scen = load_scenario(name)
        rows = micro_macro_compare(scen.n_list, scen.longitudinal, scen.mass, scen.family,
                                   scen.profile, times=scen.times, cells=scen.cells,
                                   micro_dt=scen.micro_dt)
        errs = [r.l2_rho for r in rows if r.time == 1.0]
        ok &= len(errs) == 3 and all(b <= a for a, b in zip(errs, errs[1:]))
        details.append(f"{scen.family} L2 rho {', '.join(f'{e:.3g}' for e in errs)}")
    wall = time.perf_counter() - t0
    ok &= wall <= 600.0
    verdict(10, "L2 density error non-increasing in n", ok, "; ".join(details) + f"; {wall:.0f} s")
    assert ok


def _two_path_gap(fld, prm, dt, steps=10):
    a = fld
    b = to_transformed(fld, prm)
    for _ in range(steps):
        a = prcc_pde_step(a, prm, dt)
        b = transformed_pde_step(b, prm, dt)
    back = from_transformed(b, prm)
    return max(float(np.max(np.abs(a.rho - back.rho))), float(np.max(np.abs(a.v - back.v))))


def test_criterion_11_transform_consistency(verdict):
    prm = macro_params("PRCC", g=SpeedTransformShape(30.0, 35.0))
    grid = Grid(0.0, 100.0, 100)
    x = grid.centers
    bump = np.exp(-((x - 50.0) / 10.0) ** 2)
    fld = MacroField(grid, 0.08 + 0.05 * bump, 30.0 + 2.0 * bump)
    h = stable_dt(fld, prm, "PRCC")
    e1, e2, e3 = (_two_path_gap(fld, prm, h / 2 ** k) for k in range(3))
    # Richardson: e(h) ~ C h^2 from the two coarsest steps, then predict the finest
    C = (e1 - e2) / (h * h * (1 - 0.25))
    order = math.log2(e2 / e3)
    ok = 1.8 <= order <= 2.2 and e3 <= 1.25 * C * (h / 4) ** 2
    verdict(11, "speed-form vs transformed-form agree to second order", ok,
            f"observed order {order:.3f}, finest gap {e3:.3g} vs C dt^2 {C * (h / 4) ** 2:.3g}")
    assert ok
