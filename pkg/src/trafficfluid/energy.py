"""Lyapunov energies of the fleet, their gradients, dissipation rates and size bounds.

Two energies share the potential, boundary and heading-penalty terms and differ
in the kinetic part:

* ``H``   uses ``0.5 (v cos th - v*)^2 + 0.5 b v^2 sin^2 th``;
* ``H_R`` divides that same numerator by ``(v_max - v) v``, which makes the
  energy blow up at both speed limits.

Gradients are ordered like ``FleetState.as_vector`` (x, y, theta, v blocks).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fleet import DomainError, FleetState, PairMatrix, RoadSpec, in_state_space, pair_geometry
from .potentials import PotentialSuite, eval_kappa, eval_U, eval_V


@dataclass(frozen=True)
class ClfParams:
    """Heading-penalty weight ``A`` and lateral kinetic weight ``b``."""

    A: float = 1.0
    b: float = 1.0

    def check(self, road: RoadSpec) -> None:
        if not self.A > 0:
            raise ValueError(f"A must be positive, got {self.A}")
        if not self.b > 1.0 - road.v_star / road.v_max:
            raise ValueError(f"b must exceed 1 - v*/v_max = {1 - road.v_star / road.v_max:.6g}, got {self.b}")


def require_admissible(state: FleetState, road: RoadSpec, pairs: PairMatrix) -> None:
    """Raise ``DomainError`` unless ``state`` lies strictly inside the state space."""
    ok = (np.all(np.abs(state.y) < road.half_width)
          and np.all(np.abs(state.theta) < road.phi)
          and np.all(state.v > 0) and np.all(state.v < road.v_max))
    if ok and state.n > 1:
        _, _, d = pair_geometry(state, pairs)
        ok = bool(np.all(d > pairs.L))
    if not ok:
        rep = in_state_space(state, road, pairs)
        raise DomainError("state outside the admissible set: " + "; ".join(str(v) for v in rep.violations))


@dataclass
class PairField:
    """Pairwise geometry and potential evaluations for one state snapshot."""

    dx: np.ndarray
    dy: np.ndarray
    d: np.ndarray
    V: np.ndarray       # V_ij(d_ij), zero on the diagonal
    dV: np.ndarray      # V'_ij(d_ij)
    kappa: np.ndarray   # kappa_ij(d_ij)

    @property
    def force_x(self) -> np.ndarray:
        """Per-vehicle sum of ``V' (x_i - x_j) / d``."""
        return np.sum(self.dV * self.dx / self.d, axis=1)

    def force_y(self, p: np.ndarray) -> np.ndarray:
        return np.sum(p * self.dV * self.dy / self.d, axis=1)


def pair_field(state: FleetState, suite: PotentialSuite, pairs: PairMatrix) -> PairField:
    dx, dy, d = pair_geometry(state, pairs)
    V, dV = eval_V(suite, d, pairs.L)
    kap, _ = eval_kappa(suite, d, pairs.L)
    np.fill_diagonal(V, 0.0)
    np.fill_diagonal(dV, 0.0)
    np.fill_diagonal(kap, 0.0)
    return PairField(dx, dy, d, V, dV, kap)


def heading_penalty(theta, A: float, cos_phi: float):
    c = np.cos(theta)
    val = A * (1.0 / (c - cos_phi) - 1.0 / (1.0 - cos_phi))
    der = A * np.sin(theta) / (c - cos_phi) ** 2
    return val, der


def _potential_part(state, suite, params, road, pairs):
    pf = pair_field(state, suite, pairs)
    U, dU = eval_U(suite, state.y, road.half_width)
    pen, dpen = heading_penalty(state.theta, params.A, road.cos_phi)
    total = float(np.sum(U) + 0.5 * np.sum(pf.V) + np.sum(pen))
    return total, pf, dU, dpen


def newtonian_kinetic(v, theta, v_star, b):
    c, s = np.cos(theta), np.sin(theta)
    lon = v * c - v_star
    val = 0.5 * lon ** 2 + 0.5 * b * (v * s) ** 2
    d_theta = -lon * v * s + b * v * v * s * c
    d_v = lon * c + b * v * s * s
    return val, d_theta, d_v


def relativistic_kinetic(v, theta, v_star, v_max, b):
    c, s = np.cos(theta), np.sin(theta)
    lon = v * c - v_star
    N = lon ** 2 + b * (v * s) ** 2
    D = (v_max - v) * v
    val = 0.5 * N / D
    d_theta = (-lon * v * s + b * v * v * s * c) / D
    d_v = 0.5 * ((2.0 * lon * c + 2.0 * b * v * s * s) * D - N * (v_max - 2.0 * v)) / D ** 2
    return val, d_theta, d_v


def eval_H(state: FleetState, suite: PotentialSuite, params: ClfParams,
           road: RoadSpec, pairs: PairMatrix) -> float:
    require_admissible(state, road, pairs)
    pot, *_ = _potential_part(state, suite, params, road, pairs)
    kin, _, _ = newtonian_kinetic(state.v, state.theta, road.v_star, params.b)
    return float(np.sum(kin)) + pot


def eval_H_R(state: FleetState, suite: PotentialSuite, params: ClfParams,
             road: RoadSpec, pairs: PairMatrix) -> float:
    require_admissible(state, road, pairs)
    pot, *_ = _potential_part(state, suite, params, road, pairs)
    kin, _, _ = relativistic_kinetic(state.v, state.theta, road.v_star, road.v_max, params.b)
    return float(np.sum(kin)) + pot


def _grad(state, suite, params, road, pairs, kinetic):
    require_admissible(state, road, pairs)
    _, pf, dU, dpen = _potential_part(state, suite, params, road, pairs)
    _, k_theta, k_v = kinetic
    gx = pf.force_x
    gy = dU + pf.force_y(pairs.p)
    return np.concatenate([gx, gy, k_theta + dpen, k_v])


def grad_H(state, suite, params, road, pairs) -> np.ndarray:
    require_admissible(state, road, pairs)
    kin = newtonian_kinetic(state.v, state.theta, road.v_star, params.b)
    return _grad(state, suite, params, road, pairs, kin)


def grad_H_R(state, suite, params, road, pairs) -> np.ndarray:
    require_admissible(state, road, pairs)
    kin = relativistic_kinetic(state.v, state.theta, road.v_star, road.v_max, params.b)
    return _grad(state, suite, params, road, pairs, kin)


def viscous_dissipation(state: FleetState, suite: PotentialSuite, kappa: np.ndarray) -> float:
    """Half the pairwise sum of ``kappa (s_j - s_i)(g(s_j) - g(s_i))`` over both speed components."""
    lon = state.v * np.cos(state.theta)
    lat = state.v * np.sin(state.theta)
    g1, _ = suite.g1(lon)
    g2, _ = suite.g2(lat)
    t1 = (lon[None, :] - lon[:, None]) * (g1[None, :] - g1[:, None])
    t2 = (lat[None, :] - lat[:, None]) * (g2[None, :] - g2[:, None])
    return 0.5 * float(np.sum(kappa * (t1 + t2)))


def dissipation_delta(state, suite, params, road, pairs) -> float:
    """Energy decay rate of the pseudo-relativistic closed loop."""
    require_admissible(state, road, pairs)
    pf = pair_field(state, suite, pairs)
    lon = state.v * np.cos(state.theta) - road.v_star
    lat = state.v * np.sin(state.theta)
    f1, _ = suite.f1(lon)
    f2, _ = suite.f2(lat)
    return float(np.sum(lon * f1) + np.sum(lat * f2)) + viscous_dissipation(state, suite, pf.kappa)


def dissipation_gamma(state, suite, params, road, pairs, mu1: float, mu2: float) -> float:
    """Guaranteed lower bound on the Newtonian closed-loop energy decay rate."""
    require_admissible(state, road, pairs)
    pf = pair_field(state, suite, pairs)
    lon = state.v * np.cos(state.theta) - road.v_star
    lat = state.v * np.sin(state.theta)
    return float(mu2 * np.sum(lon ** 2) + mu1 * np.sum(lat ** 2)) + viscous_dissipation(state, suite, pf.kappa)


def newtonian_decay_rate(state, suite, params, road, pairs, k: np.ndarray, mu1: float) -> float:
    """Exact ``-dH/dt`` of the Newtonian closed loop given the gains ``k_i``."""
    require_admissible(state, road, pairs)
    pf = pair_field(state, suite, pairs)
    lon = state.v * np.cos(state.theta) - road.v_star
    lat = state.v * np.sin(state.theta)
    return float(np.sum(k * lon ** 2) + mu1 * np.sum(lat ** 2)) + viscous_dissipation(state, suite, pf.kappa)


# -- size bounds ----------------------------------------------------------

BISECTION_TOL = 1e-10
BISECTION_MAX_ITER = 200
BRACKET_CAP = 1e12


def _level_crossing(func, inner: float, singular: float, s: float) -> float:
    """Outermost point between ``inner`` and ``singular`` where ``func`` stays at most ``s``.

    ``func`` must be non-decreasing along the path from ``inner`` towards the
    ``singular`` end, where it diverges. The returned point is on the side
    where ``func`` exceeds ``s`` (or reaches the cap), so it bounds every point
    of the sublevel set conservatively.
    """
    span = singular - inner
    lo, hi = 0.0, None
    with np.errstate(all="ignore"):
        for k in range(1, 64):
            t = 1.0 - 2.0 ** (-k)
            val = float(func(inner + t * span))
            if not val <= s or val >= BRACKET_CAP:
                hi = t
                break
            lo = t
        if hi is None:
            return inner + lo * span
        for _ in range(BISECTION_MAX_ITER):
            if (hi - lo) * abs(span) <= BISECTION_TOL:
                break
            mid = 0.5 * (lo + hi)
            if float(func(inner + mid * span)) <= s:
                lo = mid
            else:
                hi = mid
    return inner + hi * span


def speed_ratio(v, v_star: float, v_max: float):
    """``(v - v*)^2 / ((v_max - v) v)``; lower bound on twice the relativistic kinetic term."""
    v = np.asarray(v, dtype=float)
    return (v - v_star) ** 2 / ((v_max - v) * v)


def invert_speed_ratio(level: float, v_star: float, v_max: float) -> tuple[float, float]:
    """Speeds ``(lo, hi)`` bracketing ``v*`` where the speed ratio reaches ``level``."""
    if level < 0:
        raise ValueError("level must be non-negative")
    if level == 0:
        return v_star, v_star
    f = lambda v: speed_ratio(v, v_star, v_max)
    return (_level_crossing(f, v_star, 0.0, level),
            _level_crossing(f, v_star, v_max, level))


@dataclass
class SizeBounds:
    """Evaluated confinement bounds for one energy level."""

    level: float
    omega: float
    eta: np.ndarray
    rho_pair: np.ndarray
    ell1: float
    ell2: float


def size_bounds(level: float, suite: PotentialSuite, params: ClfParams,
                road: RoadSpec, pairs: PairMatrix) -> SizeBounds:
    """Bounds on heading, lateral offset, separation and speed implied by an energy level.

    Every state whose energy is at most ``level`` has ``|theta_i| <= omega``,
    ``|y_i| <= eta[i]`` and ``d_ij >= rho_pair[i, j]``. The speed interval
    ``[ell1, ell2]`` applies to the relativistic energy only: its kinetic term
    is at least half the speed ratio, so speeds are confined to where that
    ratio is at most twice the level.
    """
    s = float(level)
    if s < 0 or math.isnan(s):
        raise ValueError(f"energy level must be non-negative, got {level}")
    n = pairs.n
    cphi = road.cos_phi

    if s == 0:
        omega = 0.0
    else:
        pen = lambda th: params.A * (1.0 / (math.cos(th) - cphi) - 1.0 / (1.0 - cphi))
        omega = _level_crossing(pen, 0.0, road.phi, s)

    a = road.half_width
    U = lambda y: suite.U(np.array([y]), a)[0][0]
    eta_val = _level_crossing(U, 0.0, a, s)
    eta = np.full(n, eta_val)

    rho = np.full((n, n), np.nan)
    cache = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            Lij = float(pairs.L[i, j])
            if Lij not in cache:
                if s == 0:
                    cache[Lij] = suite.lam
                else:
                    V = lambda d, Lij=Lij: suite.V(np.array([d]), Lij, suite.lam)[0][0]
                    cache[Lij] = _level_crossing(V, suite.lam, Lij, s)
            rho[i, j] = cache[Lij]

    ell1, ell2 = invert_speed_ratio(2.0 * s, road.v_star, road.v_max)
    return SizeBounds(s, omega, eta, rho, ell1, ell2)
