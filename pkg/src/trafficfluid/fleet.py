"""Microscopic state space for n vehicles on a lane-free road.

State ordering follows w = (x_1..x_n, y_1..y_n, theta_1..theta_n, v_1..v_n).
Vehicles are indexed from 0 internally; reports use 1-based ids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    """Raised when a quantity is evaluated outside its domain of definition."""


@dataclass(frozen=True)
class RoadSpec:
    """Road of width ``2 * half_width`` with speed limit and heading bound."""

    half_width: float
    v_max: float
    v_star: float = 30.0
    phi: float = 0.25

    @property
    def cos_phi(self) -> float:
        return math.cos(self.phi)


@dataclass(frozen=True)
class VehicleSpec:
    sigma: float
    index: int = 0


@dataclass(frozen=True)
class PairMatrix:
    """Symmetric weighting factors ``p`` and minimum separations ``L``."""

    p: np.ndarray
    L: np.ndarray

    @classmethod
    def uniform(cls, n: int, p: float, L: float) -> "PairMatrix":
        P = np.full((n, n), float(p))
        Lm = np.full((n, n), float(L))
        np.fill_diagonal(P, 1.0)
        np.fill_diagonal(Lm, 0.0)
        return cls(P, Lm)

    @property
    def n(self) -> int:
        return self.p.shape[0]

    def max_L(self) -> float:
        n = self.n
        if n < 2:
            return 0.0
        off = ~np.eye(n, dtype=bool)
        return float(self.L[off].max())


@dataclass
class FleetState:
    x: np.ndarray
    y: np.ndarray
    theta: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.theta = np.asarray(self.theta, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if not (self.x.shape == self.y.shape == self.theta.shape == self.v.shape):
            raise ValueError("state components must have equal length")

    @property
    def n(self) -> int:
        return self.x.size

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.y, self.theta, self.v])

    @classmethod
    def from_vector(cls, w) -> "FleetState":
        w = np.asarray(w, dtype=float)
        if w.size % 4:
            raise ValueError("state vector length must be a multiple of 4")
        n = w.size // 4
        return cls(w[:n].copy(), w[n:2 * n].copy(), w[2 * n:3 * n].copy(), w[3 * n:].copy())

    def copy(self) -> "FleetState":
        return FleetState(self.x.copy(), self.y.copy(), self.theta.copy(), self.v.copy())


@dataclass
class ControlVector:
    u: np.ndarray
    F: np.ndarray


def weighted_distance(state: FleetState, pairs: PairMatrix, i: int, j: int) -> float:
    n = state.n
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"vehicle index out of range: ({i}, {j}) for n={n}")
    if i == j:
        raise ValueError("weighted_distance needs two distinct vehicles")
    dx = state.x[i] - state.x[j]
    dy = state.y[i] - state.y[j]
    return math.sqrt(dx * dx + pairs.p[i, j] * dy * dy)


def pair_geometry(state: FleetState, pairs: PairMatrix):
    """Return ``(dx, dy, d)`` matrices with ``d`` set to ``inf`` on the diagonal."""
    dx = state.x[:, None] - state.x[None, :]
    dy = state.y[:, None] - state.y[None, :]
    d = np.sqrt(dx * dx + pairs.p * dy * dy)
    np.fill_diagonal(d, np.inf)
    return dx, dy, d


@dataclass(frozen=True)
class Violation:
    kind: str
    ids: tuple
    margin: float

    def __str__(self) -> str:
        who = ",".join(str(k) for k in self.ids)
        return f"{self.kind} ({who}): margin {self.margin:.6g}"


@dataclass
class AdmissibilityReport:
    violations: list = field(default_factory=list)
    min_separation_margin: float = math.inf
    min_lateral_margin: float = math.inf
    min_heading_margin: float = math.inf
    min_speed_margin: float = math.inf

    @property
    def ok(self) -> bool:
        return not self.violations


def in_state_space(state: FleetState, road: RoadSpec, pairs: PairMatrix) -> AdmissibilityReport:
    """Check membership of ``state`` in the open set of admissible fleet states.

    Every failing constraint is listed with its signed margin (negative or zero
    means violated). Vehicle ids in the report are 1-based.
    """
    rep = AdmissibilityReport()
    n = state.n
    if pairs.n != n:
        raise ValueError(f"pair matrix is {pairs.n}x{pairs.n} but fleet has {n} vehicles")
    for i in range(n):
        lat = road.half_width - abs(state.y[i])
        head = road.phi - abs(state.theta[i])
        lo = state.v[i]
        hi = road.v_max - state.v[i]
        rep.min_lateral_margin = min(rep.min_lateral_margin, lat)
        rep.min_heading_margin = min(rep.min_heading_margin, head)
        rep.min_speed_margin = min(rep.min_speed_margin, lo, hi)
        if not lat > 0:
            rep.violations.append(Violation("lateral bound", (i + 1,), lat))
        if not head > 0:
            rep.violations.append(Violation("heading bound", (i + 1,), head))
        if not lo > 0:
            rep.violations.append(Violation("speed lower bound", (i + 1,), lo))
        if not hi > 0:
            rep.violations.append(Violation("speed upper bound", (i + 1,), hi))
    for i in range(n):
        for j in range(i + 1, n):
            m = weighted_distance(state, pairs, i, j) - pairs.L[i, j]
            rep.min_separation_margin = min(rep.min_separation_margin, m)
            if not m > 0:
                rep.violations.append(Violation("separation pair", (i + 1, j + 1), m))
    return rep


def steering_from_angular_rate(u: float, v: float, sigma: float) -> float:
    """Front-wheel steering angle that realises angular rate ``u`` at speed ``v``."""
    if not v > 0:
        raise DomainError(f"speed must be positive, got {v}")
    return math.atan(sigma * u / v)


@dataclass
class ValidationResult:
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures

    def __str__(self) -> str:
        return "ok" if self.ok else "; ".join(self.failures)


def validate_scenario(road: RoadSpec, pairs: PairMatrix, controller_params=None,
                      lam: float | None = None) -> ValidationResult:
    """Check every parameter constraint of the road, pair matrix and controller.

    ``controller_params`` may provide ``b``, ``A``, ``mu1``, ``mu2`` (mapping or
    attributes). ``lam`` is the interaction radius of the potential suite.
    """
    res = ValidationResult()
    fail = res.failures.append
    if not road.half_width > 0:
        fail("road half width a must be positive")
    if not road.v_max > 0:
        fail("v_max must be positive")
    if not 0 < road.v_star < road.v_max:
        fail("set-point constraint 0 < v* < v_max")
    if not 0 < road.phi < math.pi / 2:
        fail("heading bound phi must lie in (0, pi/2)")
    elif road.v_max > 0 and not math.cos(road.phi) > road.v_star / road.v_max:
        fail("heading constraint cos(phi) > v*/v_max")

    P, L = pairs.p, pairs.L
    n = pairs.n
    off = ~np.eye(n, dtype=bool)
    if P.shape != (n, n) or L.shape != (n, n):
        fail("pair matrices must be square")
    else:
        if not np.allclose(P, P.T, rtol=0, atol=0) or not np.allclose(L, L.T, rtol=0, atol=0):
            fail("pair matrices must be symmetric")
        if n > 1 and not np.all(P[off] >= 1.0):
            fail("weighting factors p_ij must be >= 1")
        if n > 1 and not np.all(L[off] > 0):
            fail("minimum separations L_ij must be positive")
    if lam is not None and n > 1 and not lam > pairs.max_L():
        fail("interaction radius constraint lambda > max L_ij")

    if controller_params is not None:
        get = (controller_params.get if isinstance(controller_params, dict)
               else lambda k, d=None: getattr(controller_params, k, d))
        b = get("b", None)
        A = get("A", None)
        if b is not None and road.v_max > 0 and not b > 1.0 - road.v_star / road.v_max:
            fail("b constraint b > 1 - v*/v_max")
        if A is not None and not A > 0:
            fail("penalty weight A must be positive")
        for key in ("mu1", "mu2"):
            g = get(key, None)
            if g is not None and not g > 0:
                fail(f"gain {key} must be positive")
    return res
