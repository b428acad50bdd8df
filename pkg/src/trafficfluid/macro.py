"""One-dimensional continuum ("traffic fluid") models and the particle/continuum comparison.

The continuum parameters follow directly from the single-file controller:

=================  ==============================
rho_max            m / L
rho_bar            m / lambda
P(rho)             z - m Phi'(m / rho)
mu(rho)            (m^2 / rho) K(m / rho)
f, g, r, gamma     f1, g1, r, mu2 of the controller
=================  ==============================

Both momentum equations are stepped with explicit Euler on a uniform cell
grid: upwind fluxes for transport, central differences for pressure and a
conservative three-point stencil for viscosity.
"""

from __future__ import annotations


from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .fleet import DomainError
from .microsim import (IntegratorConfig, LongitudinalParams, longitudinal_simulate)
from .potentials import Linear, SmoothRelu

CFL_SAFETY = 0.4


class CflError(ValueError):
    """Time step exceeds the stability limit of the explicit scheme."""


class ConstraintError(RuntimeError):
    """A cell left ``0 < rho < rho_max`` or ``0 < v < v_max`` after a step."""

    def __init__(self, message: str, cell: int):
        super().__init__(message)
        self.cell = cell


# -- parameters ------------------------------------------------------------

@dataclass(frozen=True)
class MacroParams:
    rho_max: float
    rho_bar: float
    v_max: float
    v_star: float
    P: Callable
    mu: Callable
    g: object = Linear(1.0)
    f: object = Linear(1.0)
    gamma: float = 1.0
    r: object = SmoothRelu(0.2)
    z: float = 0.0

    def q(self, v):
        """Speed weight of the pseudo-relativistic momentum equation."""
        vm, vs = self.v_max, self.v_star
        return (vm * v + vs * vm - 2.0 * vs * v) / (2.0 * (vm - v) ** 2 * v ** 2)

    def h(self, s):
        """Gain modulation of the Newtonian relaxation term."""
        rv, _ = self.r(s)
        return self.v_max * rv / (self.v_star * (self.v_max - self.v_star)) - s / self.v_star

    def pressure_slope(self, rho):
        rho = np.asarray(rho, dtype=float)
        d = 1e-6 * rho
        hi = np.minimum(rho + d, 0.5 * (rho + self.rho_max))
        return (self.P(hi) - self.P(rho - d)) / (hi - rho + d)


def _check_pair_shapes(Phi, K, L, lam):
    if not lam > L:
        raise ValueError("interaction length lambda must exceed L")
    probe = np.linspace(lam, 3 * lam, 64)
    if np.any(Phi(probe, L, lam)[0] != 0.0) or np.any(Phi(probe, L, lam)[1] != 0.0):
        raise ValueError("Phi must vanish beyond lambda")
    if np.any(K(probe, L, lam)[0] != 0.0):
        raise ValueError("K must vanish beyond lambda")
    inner = np.linspace(L + 1e-6 * (lam - L), lam, 2001)
    if np.any(K(inner, L, lam)[0] < 0.0):
        raise ValueError("K must be non-negative")
    if not Phi(np.array([L + 1e-9]), L, lam)[0][0] > 1e6:
        raise ValueError("Phi must diverge at L")


def map_micro_to_macro(Phi, K, m: float, L: float, lam: float, family: str, *,
                       v_max: float, v_star: float, f=Linear(1.0), g=Linear(1.0),
                       gamma: float = 1.0, r=SmoothRelu(0.2), z: float = 0.0) -> MacroParams:
    """Continuum parameters of a single-file platoon of total mass ``m``.

    ``Phi`` and ``K`` use the pair-shape signature ``shape(d, L, lam)``.
    """
    if family.upper() not in ("NCC", "PRCC"):
        raise ValueError(f"unknown controller family {family!r}")
    _check_pair_shapes(Phi, K, L, lam)

    def P(rho):
        rho = np.asarray(rho, dtype=float)
        _, dPhi = Phi(m / rho, L, lam)
        return z - m * dPhi

    def mu(rho):
        rho = np.asarray(rho, dtype=float)
        Kv, _ = K(m / rho, L, lam)
        return m * m / rho * Kv

    return MacroParams(rho_max=m / L, rho_bar=m / lam, v_max=v_max, v_star=v_star, P=P, mu=mu,
                       g=g, f=f, gamma=gamma, r=r, z=z)


# -- speed transform -------------------------------------------------------------

def _primitive(v, v_star, v_max):
    return (np.log(v / (v_max - v)) + (v_max - v_star) / (v_max - v) - v_star / v) / (2.0 * v_max)


def speed_transform_g(v, v_star: float, v_max: float):
    """Integral of the pseudo-relativistic speed weight ``q`` from ``v*`` to ``v``."""
    v = np.asarray(v, dtype=float)
    if np.any(v <= 0) or np.any(v >= v_max):
        raise DomainError("speed transform needs 0 < v < v_max")
    return _primitive(v, v_star, v_max) - _primitive(np.float64(v_star), v_star, v_max)


def speed_transform_inverse(w, v_star: float, v_max: float, iterations: int = 200):
    """Vectorised bisection inverse of ``speed_transform_g``."""
    w = np.asarray(w, dtype=float)
    lo = np.zeros_like(w)
    hi = np.full_like(w, v_max)
    c0 = _primitive(np.float64(v_star), v_star, v_max)
    with np.errstate(all="ignore"):
        for _ in range(iterations):
            mid = 0.5 * (lo + hi)
            below = _primitive(mid, v_star, v_max) - c0 < w
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
            if np.all(hi - lo <= 4e-16 * v_max):
                break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class SpeedTransformShape:
    """``g`` equal to the speed transform, usable wherever a speed shape is expected."""

    v_star: float
    v_max: float

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        vm, vs = self.v_max, self.v_star
        q = (vm * v + vs * vm - 2.0 * vs * v) / (2.0 * (vm - v) ** 2 * v ** 2)
        return speed_transform_g(v, vs, vm), q


# -- fields ------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    x_min: float
    x_max: float
    cells: int
    boundary: str = "periodic"

    def __post_init__(self):
        if self.boundary not in ("periodic", "inflow"):
            raise ValueError(f"unknown boundary mode {self.boundary!r}")
        if not self.x_max > self.x_min or self.cells < 3:
            raise ValueError("grid needs x_max > x_min and at least 3 cells")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / self.cells

    @property
    def centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.cells) + 0.5) * self.dx


@dataclass
class MacroField:
    """Cell averages of density and speed; ``ghosts`` hold fixed inflow-mode boundary values."""

    grid: Grid
    rho: np.ndarray
    v: np.ndarray
    ghosts: tuple = field(default=None)

    def __post_init__(self):
        self.rho = np.asarray(self.rho, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.rho.shape != (self.grid.cells,) or self.v.shape != (self.grid.cells,):
            raise ValueError("field arrays must match the grid")
        if self.ghosts is None:
            self.ghosts = ((float(self.rho[0]), float(self.v[0])), (float(self.rho[-1]), float(self.v[-1])))

    def mass(self) -> float:
        return float(np.sum(self.rho) * self.grid.dx)

    def copy(self) -> "MacroField":
        return MacroField(self.grid, self.rho.copy(), self.v.copy(), self.ghosts)


@dataclass
class TransformedField:
    """Density and transformed speed ``w = g(v)``."""

    grid: Grid
    rho: np.ndarray
    w: np.ndarray
    ghosts: tuple


def to_transformed(fld: MacroField, params: MacroParams) -> TransformedField:
    vs, vm = params.v_star, params.v_max
    gh = tuple((r, float(speed_transform_g(v, vs, vm))) for r, v in fld.ghosts)
    return TransformedField(fld.grid, fld.rho.copy(), speed_transform_g(fld.v, vs, vm), gh)


def from_transformed(tf: TransformedField, params: MacroParams) -> MacroField:
    vs, vm = params.v_star, params.v_max
    gh = tuple((r, float(speed_transform_inverse(w, vs, vm))) for r, w in tf.ghosts)
    return MacroField(tf.grid, tf.rho.copy(), speed_transform_inverse(tf.w, vs, vm), gh)


def _neighbours(a, grid: Grid, ghost_lo, ghost_hi):
    """Return ``(a_{k-1}, a_{k+1})`` with periodic wrap or fixed ghost values."""
    if grid.boundary == "periodic":
        return np.roll(a, 1), np.roll(a, -1)
    left = np.concatenate([[ghost_lo], a[:-1]])
    right = np.concatenate([a[1:], [ghost_hi]])
    return left, right


def _check_constraints(rho, v, params, what="field"):
    bad = (rho <= 0) | (rho >= params.rho_max) | ~np.isfinite(rho)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise ConstraintError(f"{what}: density out of (0, rho_max) in cell {k}: {rho[k]:.6g}", k)
    bad = (v <= 0) | (v >= params.v_max) | ~np.isfinite(v)
    if np.any(bad):
        k = int(np.argmax(bad))
        raise ConstraintError(f"{what}: speed out of (0, v_max) in cell {k}: {v[k]:.6g}", k)


def stable_dt(fld: MacroField, params: MacroParams, family: str) -> float:
    """Largest explicit step allowed by transport, pressure waves and viscosity."""
    dx = fld.grid.dx
    rho, v = fld.rho, fld.v
    q = params.q(v) if family.upper() == "PRCC" else np.ones_like(v)
    q_min = float(np.min(q))
    slope = np.maximum(params.pressure_slope(rho), 0.0)
    c_max = float(np.sqrt(np.max(slope / q)))
    _, dg = params.g(v)
    diff = float(np.max(params.mu(rho) * dg / rho))
    limit = dx / (params.v_max + c_max)
    if diff > 0:
        limit = min(limit, dx * dx * q_min / (2.0 * diff))
    return CFL_SAFETY * limit


def _check_dt(fld, params, dt, family):
    lim = stable_dt(fld, params, family)
    if not 0 < dt <= lim:
        raise CflError(f"dt={dt:.6g} violates the stability limit {lim:.6g}")


def _transport_and_forces(rho, v, gvals, grid, params, ghosts):
    """Continuity update, pressure gradient / rho and viscous force / rho."""
    (rl, vl), (rr, vr) = ghosts
    dx = grid.dx
    flux = rho * v
    flux_l, _ = _neighbours(flux, grid, rl * vl, rr * vr)
    drho = -(flux - flux_l) / dx
    P = params.P(rho)
    P_l, P_r = _neighbours(P, grid, float(params.P(rl)), float(params.P(rr)))
    press = (P_r - P_l) / (2.0 * dx) / rho
    mu = params.mu(rho)
    mu_l, mu_r = _neighbours(mu, grid, float(params.mu(rl)), float(params.mu(rr)))
    g_l, g_r, g = gvals
    visc = (0.5 * (mu + mu_r) * (g_r - g) - 0.5 * (mu + mu_l) * (g - g_l)) / (dx * dx) / rho
    return drho, press, visc


def _g_with_neighbours(shape, v, grid, ghosts):
    (_, vl), (_, vr) = ghosts
    g, _ = shape(v)
    gl_, gr_ = (float(shape(np.array([vl]))[0][0]), float(shape(np.array([vr]))[0][0]))
    left, right = _neighbours(g, grid, gl_, gr_)
    return left, right, g


def prcc_pde_step(fld: MacroField, params: MacroParams, dt: float) -> MacroField:
    """One explicit step of continuity plus the pseudo-relativistic momentum equation."""
    _check_constraints(fld.rho, fld.v, params)
    _check_dt(fld, params, dt, "PRCC")
    grid, rho, v = fld.grid, fld.rho, fld.v
    drho, press, visc = _transport_and_forces(rho, v, _g_with_neighbours(params.g, v, grid, fld.ghosts),
                                              grid, params, fld.ghosts)
    Q = speed_transform_g(v, params.v_star, params.v_max)
    (_, vl), _ = fld.ghosts
    Q_l, _ = _neighbours(Q, grid, float(speed_transform_g(vl, params.v_star, params.v_max)), 0.0)
    adv = v * (Q - Q_l) / grid.dx
    fv, _ = params.f(v - params.v_star)
    rate = (-adv - press + visc - fv) / params.q(v)
    out = MacroField(grid, rho + dt * drho, v + dt * rate, fld.ghosts)
    _check_constraints(out.rho, out.v, params, "after step")
    return out


def ncc_pde_step(fld: MacroField, params: MacroParams, dt: float) -> MacroField:
    """One explicit step of continuity plus the Newtonian momentum equation."""
    _check_constraints(fld.rho, fld.v, params)
    _check_dt(fld, params, dt, "NCC")
    grid, rho, v = fld.grid, fld.rho, fld.v
    drho, press, visc = _transport_and_forces(rho, v, _g_with_neighbours(params.g, v, grid, fld.ghosts),
                                              grid, params, fld.ghosts)
    (_, vl), _ = fld.ghosts
    v_l, _ = _neighbours(v, grid, vl, 0.0)
    adv = v * (v - v_l) / grid.dx
    G = -press + visc
    rate = -adv + G - (params.gamma + params.h(G)) * (v - params.v_star)
    out = MacroField(grid, rho + dt * drho, v + dt * rate, fld.ghosts)
    _check_constraints(out.rho, out.v, params, "after step")
    return out


def transformed_pde_step(tf: TransformedField, params: MacroParams, dt: float) -> TransformedField:
    """One explicit step of the density / transformed-speed form.

    The viscous flux is ``mu(rho) w_x``, which equals the speed-form flux when
    ``params.g`` is the speed transform itself.
    """
    vs, vm = params.v_star, params.v_max
    v = speed_transform_inverse(tf.w, vs, vm)
    ghosts_v = tuple((r, float(speed_transform_inverse(w, vs, vm))) for r, w in tf.ghosts)
    _check_constraints(tf.rho, v, params)
    _check_dt(MacroField(tf.grid, tf.rho, v, ghosts_v), params, dt, "PRCC")
    grid, rho, w = tf.grid, tf.rho, tf.w
    (_, wl), (_, wr) = tf.ghosts
    w_l, w_r = _neighbours(w, grid, wl, wr)
    drho, press, visc = _transport_and_forces(rho, v, (w_l, w_r, w), grid, params, ghosts_v)
    adv = v * (w - w_l) / grid.dx
    fv, _ = params.f(v - vs)
    rate = -adv - press + visc - fv
    out = TransformedField(grid, rho + dt * drho, w + dt * rate, tf.ghosts)
    _check_constraints(out.rho, speed_transform_inverse(out.w, vs, vm), params, "after step")
    return out


def pde_step(fld: MacroField, params: MacroParams, dt: float, family: str) -> MacroField:
    return prcc_pde_step(fld, params, dt) if family.upper() == "PRCC" else ncc_pde_step(fld, params, dt)


def run_pde(fld: MacroField, params: MacroParams, family: str, t_end: float,
            dt: float | None = None, snapshot_times=()) -> tuple[MacroField, dict]:
    """Advance to ``t_end``; returns the final field and snapshots keyed by time.

    With ``dt=None`` each step uses the stability limit of the current field,
    shortened so that snapshot times and ``t_end`` are hit exactly.
    """
    t = 0.0
    marks = sorted(set(float(s) for s in snapshot_times if 0 <= s <= t_end) | {float(t_end)})
    snaps = {}
    if marks and marks[0] == 0.0:
        snaps[0.0] = fld.copy()
    cur = fld
    for mark in marks:
        while t < mark - 1e-12:
            step = dt if dt is not None else stable_dt(cur, params, family)
            step = min(step, mark - t)
            cur = pde_step(cur, params, step, family)
            t += step
        snaps[mark] = cur.copy()
    return cur, snaps


# -- particle / continuum comparison -------------------------------------------------

@dataclass(frozen=True)
class Profile:
    """Initial continuum state; ``rho0``/``v0`` are vectorised callables of x."""

    rho0: Callable
    v0: Callable
    x_lo: float
    x_hi: float


def place_platoon(profile: Profile, n: int, m: float) -> np.ndarray:
    """Positions of ``n`` vehicles sampled from ``profile``, leader at ``x_hi``.

    Each gap is ``m / (n rho0(midpoint))``, where the midpoint comes from one
    fixed-point pass started from the density at the previous vehicle.
    """
    x = np.empty(n)
    x[0] = profile.x_hi
    for i in range(1, n):
        s = m / (n * float(profile.rho0(np.array([x[i - 1]]))[0]))
        mid = x[i - 1] - 0.5 * s
        s = m / (n * float(profile.rho0(np.array([mid]))[0]))
        x[i] = x[i - 1] - s
    return x


@dataclass
class CompareRow:
    n: int
    time: float
    l2_rho: float
    linf_rho: float
    l2_v: float
    linf_v: float

    def as_dict(self) -> dict:
        return {"n": self.n, "time": self.time, "l2_rho": self.l2_rho, "linf_rho": self.linf_rho,
                "l2_v": self.l2_v, "linf_v": self.linf_v}


def _errors_on_grid(xs, values, centers, field_vals, dx):
    order = np.argsort(xs)
    xs, values = xs[order], values[order]
    inside = (centers >= xs[0]) & (centers <= xs[-1])
    emp = np.interp(centers[inside], xs, values)
    err = emp - field_vals[inside]
    if err.size == 0:
        return 0.0, 0.0
    return float(np.sqrt(np.sum(err * err) * dx)), float(np.max(np.abs(err)))


def micro_macro_compare(n_list, prm: LongitudinalParams, m: float, family: str, profile: Profile,
                        times=(1.0,), cells: int = 2000, micro_dt: float | None = None,
                        margin: float = 5.0) -> list[CompareRow]:
    """Run the single-file platoon for every ``n`` and the matching continuum model.

    Empirical densities ``m / (n s_i)`` sit at the follower positions ``x_i``;
    empirical speeds at every vehicle. Both are interpolated onto the grid
    cells covered by the platoon and compared with the continuum fields.
    """
    fam = family.upper()
    params = map_micro_to_macro(prm.Phi, prm.K, m, prm.L, prm.lam, fam, v_max=prm.v_max,
                                v_star=prm.v_star, f=prm.f, g=prm.g, gamma=prm.gamma, r=prm.r)
    t_end = max(times)
    grid = Grid(profile.x_lo - margin, profile.x_hi + prm.v_max * t_end + margin, cells, "periodic")
    xc = grid.centers
    fld0 = MacroField(grid, profile.rho0(xc), profile.v0(xc))
    _, snaps = run_pde(fld0, params, fam, t_end, snapshot_times=times)

    rows = []
    for n in n_list:
        x0 = place_platoon(profile, n, m)
        v0 = profile.v0(x0)
        dt = micro_dt if micro_dt is not None else min(1e-3, 2e-5 * (200.0 / n) ** 2)
        cfg = IntegratorConfig(dt=dt, t_end=t_end, record_every=1)
        traj = longitudinal_simulate(n, m, prm, fam, x0, v0, cfg)
        for t in times:
            k = int(np.argmin(np.abs(traj.times - t)))
            xs = traj.x[k]
            dens = m / (n * (xs[:-1] - xs[1:]))
            snap = snaps[float(t)]
            l2r, lir = _errors_on_grid(xs[1:], dens, xc, snap.rho, grid.dx)
            l2v, liv = _errors_on_grid(xs, traj.v[k], xc, snap.v, grid.dx)
            rows.append(CompareRow(n, float(t), l2r, lir, l2v, liv))
    return rows


__all__ = [
    "MacroParams", "MacroField", "TransformedField", "Grid", "Profile", "CompareRow", "CflError",
    "ConstraintError", "map_micro_to_macro", "speed_transform_g", "speed_transform_inverse",
    "SpeedTransformShape", "to_transformed", "from_transformed", "prcc_pde_step", "ncc_pde_step",
    "transformed_pde_step", "pde_step", "run_pde", "stable_dt", "place_platoon",
    "micro_macro_compare",
]
