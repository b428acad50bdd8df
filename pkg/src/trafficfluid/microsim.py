"""Closed-loop integration of the fleet with online safety and energy guards.

A ``ClosedLoop`` bundles road, pair matrix and controller gains. ``simulate``
advances it with fixed-step RK4 (compiled when the potential suite uses the
default families, numpy otherwise) or with scipy's adaptive RK45.

Guards run after every accepted RK4 step: the new state must stay admissible
and the controller's own Lyapunov energy may not grow by more than
``1e-8 * max(1, E0)``. A failed step is retried with 2, 4, ... 256 substeps;
each trigger is logged as a ``GuardEvent`` and exhaustion raises
``SimulationError``.

The longitudinal (single-file) models used for the continuum comparison live
at the bottom of the module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from . import _kernels as K
from .controllers import (NccGains, PrccGains, default_ncc_gains, default_prcc_gains,
                          ncc_terms, prcc_terms)
from .energy import (ClfParams, dissipation_delta, dissipation_gamma, eval_H, eval_H_R,
                     require_admissible)
from .fleet import (ControlVector, DomainError, FleetState, PairMatrix, RoadSpec,
                    in_state_space)
from .potentials import Linear, PotentialSuite, QuarticBoundaryPotential, SmoothRelu

GUARD_KINDS = ("collision", "speed-bound", "heading-bound", "lateral-bound", "energy-increase")
_CODE_TO_KIND = {
    K.BAD_LATERAL: "lateral-bound",
    K.BAD_HEADING: "heading-bound",
    K.BAD_SPEED: "speed-bound",
    K.BAD_SEPARATION: "collision",
    K.BAD_ENERGY: "energy-increase",
}
_VIOLATION_TO_KIND = {
    "lateral bound": "lateral-bound",
    "heading bound": "heading-bound",
    "speed lower bound": "speed-bound",
    "speed upper bound": "speed-bound",
    "separation pair": "collision",
}
MAX_HALVINGS = 8


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-3
    t_end: float = 10.0
    method: str = "rk4"
    rtol: float = 1e-8
    record_every: int = 100

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.method not in ("rk4", "rk45"):
            raise ValueError(f"unknown integration method {self.method!r}")
        if self.method == "rk45" and not self.rtol > 0:
            raise ValueError("rtol must be positive for adaptive integration")
        if int(self.record_every) < 1:
            raise ValueError("record_every must be at least 1")


@dataclass(frozen=True)
class GuardEvent:
    time: float
    kind: str
    ids: tuple
    margin: float
    recovered: bool = False

    def __post_init__(self):
        if self.kind not in GUARD_KINDS:
            raise ValueError(f"unknown guard kind {self.kind!r}")

    def as_dict(self) -> dict:
        return {"time": self.time, "kind": self.kind, "ids": list(self.ids),
                "margin": self.margin, "recovered": self.recovered}


class SimulationError(RuntimeError):
    """Guard retries exhausted; carries the triggering event and the partial trajectory."""

    def __init__(self, event: GuardEvent, trajectory=None):
        super().__init__(f"guard exhausted at t={event.time:.6g}: {event.kind} {event.ids} "
                         f"(margin {event.margin:.3g})")
        self.event = event
        self.trajectory = trajectory


@dataclass
class Trajectory:
    """Samples of a closed-loop run. ``states`` rows follow ``FleetState.as_vector``."""

    times: np.ndarray
    states: np.ndarray
    F: np.ndarray
    u: np.ndarray
    H: np.ndarray
    H_R: np.ndarray | None
    dissipation: np.ndarray
    dissipation_name: str
    events: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.states.shape[1] // 4

    def state(self, k: int) -> FleetState:
        return FleetState.from_vector(self.states[k])

    @property
    def clf(self) -> np.ndarray:
        """Energy that the controller is designed to decrease."""
        return self.H_R if self.H_R is not None else self.H


@dataclass(frozen=True)
class ClosedLoop:
    """Road, pair data and controller for one fleet."""

    road: RoadSpec
    pairs: PairMatrix
    gains: NccGains | PrccGains

    @property
    def family(self) -> str:
        return "NCC" if isinstance(self.gains, NccGains) else "PRCC"

    @property
    def suite(self) -> PotentialSuite:
        return self.gains.suite

    @property
    def clf(self) -> ClfParams:
        return self.gains.clf

    @property
    def viscous(self) -> bool:
        return self.suite.viscous

    def controls(self, state: FleetState) -> ControlVector:
        if self.family == "NCC":
            t = ncc_terms(state, self.gains, self.road, self.pairs)
        else:
            t = prcc_terms(state, self.gains, self.road, self.pairs)
        return ControlVector(t.u, t.F)

    def H(self, state: FleetState) -> float:
        return eval_H(state, self.suite, self.clf, self.road, self.pairs)

    def H_R(self, state: FleetState) -> float:
        return eval_H_R(state, self.suite, self.clf, self.road, self.pairs)

    def clf_value(self, state: FleetState) -> float:
        return self.H(state) if self.family == "NCC" else self.H_R(state)

    def dissipation(self, state: FleetState) -> float:
        if self.family == "NCC":
            return dissipation_gamma(state, self.suite, self.clf, self.road, self.pairs,
                                     self.gains.mu1, self.gains.mu2)
        return dissipation_delta(state, self.suite, self.clf, self.road, self.pairs)

    # -- compiled fast path -------------------------------------------------
    def kernel_params(self) -> np.ndarray:
        s, r, c = self.suite, self.road, self.clf
        prm = np.zeros(K.PRM_SIZE)
        prm[K.PRM_VSTAR] = r.v_star
        prm[K.PRM_VMAX] = r.v_max
        prm[K.PRM_COSPHI] = r.cos_phi
        prm[K.PRM_PHI] = r.phi
        prm[K.PRM_A_ROAD] = r.half_width
        prm[K.PRM_LAM] = s.lam
        prm[K.PRM_Q1] = s.V.q1
        prm[K.PRM_Q2] = s.kappa.q2
        prm[K.PRM_C] = s.U.c
        prm[K.PRM_EPS] = s.r.eps
        prm[K.PRM_A] = c.A
        prm[K.PRM_B] = c.b
        prm[K.PRM_F1] = s.f1.gain
        prm[K.PRM_F2] = s.f2.gain
        if self.family == "NCC":
            prm[K.PRM_MU1] = self.gains.mu1
            prm[K.PRM_MU2] = self.gains.mu2
        return prm

    def family_code(self) -> int:
        return K.FAMILY_NCC if self.family == "NCC" else K.FAMILY_PRCC

    def energy_code(self) -> int:
        return K.ENERGY_H if self.family == "NCC" else K.ENERGY_HR


def closed_loop_rhs(state: FleetState, loop: ClosedLoop) -> np.ndarray:
    """Time derivative of the stacked state under the loop's controller."""
    require_admissible(state, loop.road, loop.pairs)
    ctl = loop.controls(state)
    return np.concatenate([state.v * np.cos(state.theta), state.v * np.sin(state.theta), ctl.u, ctl.F])


# -- steppers ----------------------------------------------------------------

class _CompiledStepper:
    def __init__(self, loop: ClosedLoop):
        self.prm = loop.kernel_params()
        self.L = np.ascontiguousarray(loop.pairs.L, dtype=float)
        self.P = np.ascontiguousarray(loop.pairs.p, dtype=float)
        self.fam = loop.family_code()
        self.ek = loop.energy_code()

    def advance(self, w, dt, nsteps, e_prev, e_tol):
        steps, code, i, j, margin, e_last = K.advance(w, dt, nsteps, self.prm, self.L, self.P,
                                                      self.fam, self.ek, e_prev, e_tol)
        return steps, _CODE_TO_KIND.get(code), _ids(i, j), margin, e_last

    def sample(self, w):
        n = w.size // 4
        F = np.empty(n)
        u = np.empty(n)
        K.controls(w, self.prm, self.L, self.P, self.fam, F, u)
        H = K.energy(w, self.prm, self.L, self.P, K.ENERGY_H)
        HR = K.energy(w, self.prm, self.L, self.P, K.ENERGY_HR) if self.fam == K.FAMILY_PRCC else None
        return F, u, H, HR, K.dissipation(w, self.prm, self.L, self.P, self.fam)

    def energy(self, w):
        return K.energy(w, self.prm, self.L, self.P, self.ek)


def _ids(i, j):
    return tuple(k + 1 for k in (i, j) if k >= 0)


class _NumpyStepper:
    """Reference stepper for suites outside the compiled families."""

    def __init__(self, loop: ClosedLoop):
        self.loop = loop

    def _violation(self, w):
        rep = in_state_space(FleetState.from_vector(w), self.loop.road, self.loop.pairs)
        if rep.ok:
            return None
        v = rep.violations[0]
        return _VIOLATION_TO_KIND[v.kind], tuple(v.ids), v.margin

    def _rhs(self, w):
        return closed_loop_rhs(FleetState.from_vector(w), self.loop)

    def advance(self, w, dt, nsteps, e_prev, e_tol):
        for step in range(nsteps):
            k1 = self._rhs(w)
            stages = []
            bad = None
            for frac, kprev in ((0.5, k1), (0.5, None), (1.0, None)):
                kprev = kprev if kprev is not None else stages[-1]
                trial = w + frac * dt * kprev
                bad = self._violation(trial)
                if bad:
                    break
                stages.append(self._rhs(trial))
            if bad:
                return step, bad[0], bad[1], bad[2], e_prev
            k2, k3, k4 = stages
            out = w + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
            bad = self._violation(out)
            if bad:
                return step, bad[0], bad[1], bad[2], e_prev
            e_new = self.energy(out)
            if not e_new <= e_prev + e_tol:
                return step, "energy-increase", (), e_prev + e_tol - e_new, e_prev
            w[:] = out
            e_prev = e_new
        return nsteps, None, (), 0.0, e_prev

    def sample(self, w):
        st = FleetState.from_vector(w)
        ctl = self.loop.controls(st)
        H = self.loop.H(st)
        HR = self.loop.H_R(st) if self.loop.family == "PRCC" else None
        return ctl.F, ctl.u, H, HR, self.loop.dissipation(st)

    def energy(self, w):
        return self.loop.clf_value(FleetState.from_vector(w))


def make_stepper(loop: ClosedLoop):
    return _CompiledStepper(loop) if loop.suite.parametric else _NumpyStepper(loop)


# -- simulate ------------------------------------------------------------------

def simulate(loop: ClosedLoop, initial: FleetState, cfg: IntegratorConfig) -> Trajectory:
    """Integrate the closed loop from ``initial`` over ``[0, cfg.t_end]``."""
    require_admissible(initial, loop.road, loop.pairs)
    if cfg.method == "rk45":
        return _simulate_adaptive(loop, initial, cfg)

    stepper = make_stepper(loop)
    w = initial.as_vector().copy()
    total = int(round(cfg.t_end / cfg.dt))
    stride = int(cfg.record_every)
    e0 = stepper.energy(w)
    e_tol = 1e-8 * max(1.0, e0)
    e_prev = e0

    rows_t, rows_w, rows = [0.0], [w.copy()], [stepper.sample(w)]
    events: list[GuardEvent] = []
    done = 0
    while done < total:
        block = min(stride, total - done)
        taken = 0
        while taken < block:
            steps, kind, ids, margin, e_prev = stepper.advance(w, cfg.dt, block - taken, e_prev, e_tol)
            taken += steps
            if kind is None:
                continue
            t_fail = (done + taken) * cfg.dt
            recovered = False
            for r in range(1, MAX_HALVINGS + 1):
                m = 2 ** r
                trial = w.copy()
                s2, kind2, ids2, margin2, e2 = stepper.advance(trial, cfg.dt / m, m, e_prev, e_tol)
                if kind2 is None:
                    w[:] = trial
                    e_prev = e2
                    taken += 1
                    recovered = True
                    break
            event = GuardEvent(t_fail, kind, ids, float(margin), recovered)
            events.append(event)
            if not recovered:
                traj = _pack(rows_t, rows_w, rows, loop, events)
                raise SimulationError(event, traj)
        done += block
        rows_t.append(done * cfg.dt)
        rows_w.append(w.copy())
        rows.append(stepper.sample(w))
    return _pack(rows_t, rows_w, rows, loop, events)


def _pack(times, states, rows, loop, events) -> Trajectory:
    F = np.array([r[0] for r in rows])
    u = np.array([r[1] for r in rows])
    H = np.array([r[2] for r in rows])
    HR = np.array([r[3] for r in rows]) if loop.family == "PRCC" else None
    D = np.array([r[4] for r in rows])
    name = "Gamma" if loop.family == "NCC" else "Delta"
    return Trajectory(np.array(times), np.array(states), F, u, H, HR, D, name, list(events))


def _simulate_adaptive(loop, initial, cfg) -> Trajectory:
    stepper = make_stepper(loop)
    n_samples = int(round(cfg.t_end / (cfg.dt * cfg.record_every)))
    t_eval = np.linspace(0.0, n_samples * cfg.dt * cfg.record_every, n_samples + 1)

    def f(_t, w):
        try:
            return closed_loop_rhs(FleetState.from_vector(w), loop)
        except DomainError:
            return np.full_like(w, np.nan)

    sol = solve_ivp(f, (0.0, t_eval[-1]), initial.as_vector(), method="RK45", t_eval=t_eval,
                    rtol=cfg.rtol, atol=cfg.rtol * 1e-3)
    events = []
    rows, rows_w = [], []
    e0 = stepper.energy(sol.y[:, 0])
    e_prev, e_tol = e0, 1e-8 * max(1.0, e0)
    for k, t in enumerate(sol.t):
        w = sol.y[:, k].copy()
        rep = in_state_space(FleetState.from_vector(w), loop.road, loop.pairs)
        if not rep.ok:
            v = rep.violations[0]
            event = GuardEvent(float(t), _VIOLATION_TO_KIND[v.kind], tuple(v.ids), v.margin)
            events.append(event)
            raise SimulationError(event, _pack(list(sol.t[:k]), rows_w, rows, loop, events))
        e = stepper.energy(w)
        if not e <= e_prev + e_tol:
            events.append(GuardEvent(float(t), "energy-increase", (), e_prev + e_tol - e, True))
        e_prev = e
        rows_w.append(w)
        rows.append(stepper.sample(w))
    if not sol.success:
        event = GuardEvent(float(sol.t[-1]) if sol.t.size else 0.0, "energy-increase", (), math.nan)
        raise SimulationError(event, _pack(list(sol.t), rows_w, rows, loop, events))
    return _pack(list(sol.t), rows_w, rows, loop, events)


# -- reference scenario ------------------------------------------------------------

REFERENCE_ROAD = RoadSpec(half_width=7.2, v_max=35.0, v_star=30.0, phi=0.25)
REFERENCE_P = 5.11
REFERENCE_L = 5.59
REFERENCE_LAMBDA = 25.0


def reference_loop(family: str, viscous: bool, n: int = 10) -> ClosedLoop:
    """Ten-vehicle benchmark: lambda = 25, L = 5.59, p = 5.11, a = 7.2, phi = 0.25, v_max = 35."""
    pairs = PairMatrix.uniform(n, REFERENCE_P, REFERENCE_L)
    fam = family.upper()
    if fam == "NCC":
        gains = default_ncc_gains(viscous, REFERENCE_LAMBDA, REFERENCE_ROAD.v_max)
    elif fam == "PRCC":
        gains = default_prcc_gains(viscous, REFERENCE_LAMBDA, REFERENCE_ROAD.v_max)
    else:
        raise ValueError(f"unknown controller family {family!r}")
    return ClosedLoop(REFERENCE_ROAD, pairs, gains)


def random_initial_state(n: int, road: RoadSpec, pairs: PairMatrix, suite: PotentialSuite,
                         seed: int, spacing: float = 15.0, jitter: float = 5.0) -> FleetState:
    """Seeded admissible start: staggered column with jittered gaps and mixed speeds.

    Gaps are ``spacing +- jitter``, speeds uniform in
    ``[0.5 v*, min(0.9 v_max / cos(phi), 1.1 v*)]``, headings in
    ``[-phi/2, phi/2]`` and lateral offsets inside the zone where the boundary
    potential vanishes. Draws are repeated until the state is admissible.
    """
    rng = np.random.default_rng(seed)
    c = suite.U.c if isinstance(suite.U, QuarticBoundaryPotential) else 1.5
    y_edge = 0.95 * road.half_width * math.sqrt((c - 1.0) / c)
    v_hi = min(0.9 * road.v_max / road.cos_phi, 1.1 * road.v_star, 0.999 * road.v_max)
    for _ in range(1000):
        gaps = spacing + jitter * rng.uniform(-1.0, 1.0, n - 1)
        x = -np.concatenate([[0.0], np.cumsum(gaps)])
        y = rng.uniform(-y_edge, y_edge, n)
        theta = rng.uniform(-road.phi / 2, road.phi / 2, n)
        v = rng.uniform(0.5 * road.v_star, v_hi, n)
        st = FleetState(x, y, theta, v)
        if in_state_space(st, road, pairs).ok:
            return st
    raise RuntimeError("could not draw an admissible initial state")


def equilibrium_state(n: int, road: RoadSpec, spacing: float) -> FleetState:
    """Column at the set-point speed with zero headings and lateral offsets."""
    x = -spacing * np.arange(n, dtype=float)
    return FleetState(x, np.zeros(n), np.zeros(n), np.full(n, road.v_star))


# -- longitudinal models ----------------------------------------------------------

@dataclass(frozen=True)
class LongitudinalParams:
    """Single-file platoon: ``V_ij(s) = Phi(n s)``, ``kappa_ij(s) = n^2 K(n s)``.

    ``Phi`` and ``K`` are shapes with the pair-potential signature
    ``shape(d, L, lam) -> (value, derivative)``; ``f`` and ``g`` are scalar
    shapes; ``r`` is the smooth penalty used by the Newtonian law.
    """

    L: float
    lam: float
    v_max: float
    v_star: float
    Phi: object
    K: object
    f: object = Linear(1.0)
    g: object = Linear(1.0)
    gamma: float = 1.0
    r: object = SmoothRelu(0.2)

    def __post_init__(self):
        if not self.lam < 2 * self.L:
            raise ValueError("single-file scaling needs lambda < 2 L so only neighbours interact")


@dataclass
class LongitudinalTrajectory:
    times: np.ndarray
    x: np.ndarray
    v: np.ndarray
    mass: float
    n: int
    events: list = field(default_factory=list)

    @property
    def spacings(self) -> np.ndarray:
        """``s_i = x_{i-1} - x_i`` for followers ``i = 2..n`` (columns 0..n-2)."""
        return self.x[:, :-1] - self.x[:, 1:]

    @property
    def densities(self) -> np.ndarray:
        """Empirical density ``m / (n s_i)`` attached to follower ``i``."""
        return self.mass / (self.n * self.spacings)


def longitudinal_accel(x, v, n: int, prm: LongitudinalParams, family: str) -> np.ndarray:
    """Accelerations of the single-file platoon (vehicle 0 leads)."""
    s = x[:-1] - x[1:]
    ns = n * s
    if np.any(ns <= prm.L):
        raise DomainError("spacing guard: n s_i <= L")
    _, dPhi = prm.Phi(ns, prm.L, prm.lam)
    Kv, _ = prm.K(ns, prm.L, prm.lam)
    gv, _ = prm.g(v)
    # interaction with the leader (spacing s_i) and with the follower (s_{i+1})
    G = np.zeros_like(v)
    G[1:] += n * dPhi + n * n * Kv * (gv[:-1] - gv[1:])
    G[:-1] += -n * dPhi + n * n * Kv * (gv[1:] - gv[:-1])
    vs, vm = prm.v_star, prm.v_max
    if family.upper() == "PRCC":
        q = (vm * v + vs * vm - 2.0 * vs * v) / (2.0 * (vm - v) ** 2 * v ** 2)
        fv, _ = prm.f(v - vs)
        return (-fv + G) / q
    rG, _ = prm.r(G)
    h = vm * rG / (vs * (vm - vs)) - G / vs
    return -(prm.gamma + h) * (v - vs) + G


def longitudinal_simulate(n: int, mass: float, prm: LongitudinalParams, family: str,
                          x0, v0, cfg: IntegratorConfig) -> LongitudinalTrajectory:
    """RK4 integration of the single-file platoon with a spacing guard."""
    x = np.asarray(x0, dtype=float).copy()
    v = np.asarray(v0, dtype=float).copy()
    if x.size != n or v.size != n:
        raise ValueError("initial positions and speeds must have n entries")
    total = int(round(cfg.t_end / cfg.dt))
    stride = int(cfg.record_every)
    dt = cfg.dt
    times, xs, vs_ = [0.0], [x.copy()], [v.copy()]

    def f(xx, vv):
        return vv, longitudinal_accel(xx, vv, n, prm, family)

    for step in range(1, total + 1):
        try:
            a1x, a1v = f(x, v)
            a2x, a2v = f(x + 0.5 * dt * a1x, v + 0.5 * dt * a1v)
            a3x, a3v = f(x + 0.5 * dt * a2x, v + 0.5 * dt * a2v)
            a4x, a4v = f(x + dt * a3x, v + dt * a3v)
        except DomainError:
            s = n * (x[:-1] - x[1:]) - prm.L
            k = int(np.argmin(s))
            ev = GuardEvent(step * dt, "collision", (k + 1, k + 2), float(s[k]))
            raise SimulationError(ev) from None
        x = x + dt / 6.0 * (a1x + 2 * a2x + 2 * a3x + a4x)
        v = v + dt / 6.0 * (a1v + 2 * a2v + 2 * a3v + a4v)
        s = n * (x[:-1] - x[1:]) - prm.L
        if np.any(s <= 0):
            k = int(np.argmin(s))
            raise SimulationError(GuardEvent(step * dt, "collision", (k + 1, k + 2), float(s[k])))
        if np.any(v <= 0) or np.any(v >= prm.v_max):
            k = int(np.argmin(np.minimum(v, prm.v_max - v)))
            raise SimulationError(GuardEvent(step * dt, "speed-bound", (k + 1,),
                                             float(min(v[k], prm.v_max - v[k]))))
        if step % stride == 0 or step == total:
            times.append(step * dt)
            xs.append(x.copy())
            vs_.append(v.copy())
    return LongitudinalTrajectory(np.array(times), np.array(xs), np.array(vs_), float(mass), n)


__all__ = [
    "IntegratorConfig", "GuardEvent", "SimulationError", "Trajectory", "ClosedLoop",
    "closed_loop_rhs", "simulate", "reference_loop", "random_initial_state", "equilibrium_state",
    "LongitudinalParams", "LongitudinalTrajectory", "longitudinal_accel", "longitudinal_simulate",
    "make_stepper", "REFERENCE_ROAD",
]
