"""Newtonian (NCC) and pseudo-relativistic (PRCC) cruise-control feedback laws.

Both laws compute the acceleration ``F_i`` first and then the angular rate
``u_i``, which depends on ``F_i``. All vehicles are evaluated from the same
state snapshot; the per-vehicle functions are thin views of the vectorised
``*_controls`` functions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energy import ClfParams, pair_field, require_admissible
from .fleet import ControlVector, DomainError, FleetState, PairMatrix, RoadSpec
from .potentials import PotentialSuite, eval_U


@dataclass(frozen=True)
class NccGains:
    mu1: float
    mu2: float
    clf: ClfParams
    suite: PotentialSuite

    def __post_init__(self):
        if not (self.mu1 > 0 and self.mu2 > 0):
            raise ValueError("NCC gains mu1 and mu2 must be positive")


@dataclass(frozen=True)
class PrccGains:
    clf: ClfParams
    suite: PotentialSuite


def _viscous_pull(kappa, g_vals):
    """``sum_j kappa_ij (g_j - g_i)`` for every i."""
    return kappa @ g_vals - np.sum(kappa, axis=1) * g_vals


# -- NCC -------------------------------------------------------------------

@dataclass
class NccTerms:
    Lambda: np.ndarray
    Z: np.ndarray
    k: np.ndarray
    F: np.ndarray
    u: np.ndarray


def ncc_terms(state: FleetState, gains: NccGains, road: RoadSpec, pairs: PairMatrix) -> NccTerms:
    require_admissible(state, road, pairs)
    suite, clf = gains.suite, gains.clf
    v, th = state.v, state.theta
    c, s = np.cos(th), np.sin(th)
    pf = pair_field(state, suite, pairs)
    g1, _ = suite.g1(v * c)
    g2, _ = suite.g2(v * s)

    Lam = pf.force_x - _viscous_pull(pf.kappa, g1)
    Z = -gains.mu1 * v * s + _viscous_pull(pf.kappa, g2)
    rr, _ = suite.r(-Lam)
    vmc = road.v_max * c
    k = gains.mu2 + Lam / road.v_star + vmc * rr / (road.v_star * (vmc - road.v_star))
    F = -(k * (v * c - road.v_star) + Lam) / c

    _, dU = eval_U(suite, state.y, road.half_width)
    num = Z - dU - pf.force_y(pairs.p) - clf.b * s * F
    den = road.v_star + clf.A / (v * (c - road.cos_phi) ** 2) + v * c * (clf.b - 1.0)
    return NccTerms(Lam, Z, k, F, num / den)


def ncc_controls(state, gains: NccGains, road, pairs) -> ControlVector:
    t = ncc_terms(state, gains, road, pairs)
    return ControlVector(t.u, t.F)


def ncc_lambda(state, i: int, gains: NccGains, road, pairs) -> float:
    return float(ncc_terms(state, gains, road, pairs).Lambda[i])


def ncc_gain_k(state, i: int, gains: NccGains, road, pairs) -> float:
    return float(ncc_terms(state, gains, road, pairs).k[i])


def ncc_control(state, i: int, gains: NccGains, road, pairs) -> tuple[float, float]:
    """``(F_i, u_i)`` for vehicle ``i``."""
    t = ncc_terms(state, gains, road, pairs)
    return float(t.F[i]), float(t.u[i])


# -- PRCC ------------------------------------------------------------------

def _check_speed_heading(v, theta, road):
    v = np.asarray(v, dtype=float)
    theta = np.asarray(theta, dtype=float)
    if np.any(v <= 0) or np.any(v >= road.v_max):
        raise DomainError("speed must lie strictly between 0 and v_max")
    if np.any(np.abs(theta) >= road.phi):
        raise DomainError("heading must lie strictly inside (-phi, phi)")
    return v, theta


def prcc_q(v, theta, road: RoadSpec):
    v, theta = _check_speed_heading(v, theta, road)
    vm, vs = road.v_max, road.v_star
    return (vm * v * np.cos(theta) + vs * vm - 2.0 * vs * v) / (2.0 * (vm - v) ** 2 * v ** 2)


def prcc_beta(v, theta, road: RoadSpec, clf: ClfParams):
    v, theta = _check_speed_heading(v, theta, road)
    c = np.cos(theta)
    return clf.A / (c - road.cos_phi) ** 2 + ((clf.b - 1.0) * v * c + road.v_star) / (road.v_max - v)


def prcc_a(v, theta, road: RoadSpec, clf: ClfParams):
    v, theta = _check_speed_heading(v, theta, road)
    return clf.b * road.v_max * np.sin(theta) / (2.0 * (road.v_max - v) ** 2 * v)


@dataclass
class PrccTerms:
    R: np.ndarray
    G: np.ndarray
    F: np.ndarray
    u: np.ndarray


def prcc_terms(state: FleetState, gains: PrccGains, road: RoadSpec, pairs: PairMatrix) -> PrccTerms:
    require_admissible(state, road, pairs)
    suite, clf = gains.suite, gains.clf
    v, th = state.v, state.theta
    c, s = np.cos(th), np.sin(th)
    pf = pair_field(state, suite, pairs)
    g1, _ = suite.g1(v * c)
    g2, _ = suite.g2(v * s)
    f1, _ = suite.f1(v * c - road.v_star)
    f2, _ = suite.f2(v * s)

    R = -f1 + _viscous_pull(pf.kappa, g1)
    G = -f2 + _viscous_pull(pf.kappa, g2)
    F = (R - pf.force_x) / prcc_q(v, th, road)
    _, dU = eval_U(suite, state.y, road.half_width)
    u = v / prcc_beta(v, th, road, clf) * (G - dU - prcc_a(v, th, road, clf) * F - pf.force_y(pairs.p))
    return PrccTerms(R, G, F, u)


def prcc_controls(state, gains: PrccGains, road, pairs) -> ControlVector:
    t = prcc_terms(state, gains, road, pairs)
    return ControlVector(t.u, t.F)


def prcc_control(state, i: int, gains: PrccGains, road, pairs) -> tuple[float, float]:
    """``(F_i, u_i)`` for vehicle ``i``."""
    t = prcc_terms(state, gains, road, pairs)
    return float(t.F[i]), float(t.u[i])


# -- presets -----------------------------------------------------------------

def default_ncc_gains(viscous: bool, lam: float = 25.0, v_max: float = 35.0) -> NccGains:
    """Newtonian controller with the reference parameter set (q1 = 1e-3, mu2 = 1/v_max, mu1 = 0.4)."""
    from .potentials import CubicCutoffPotential, QuadraticKernel, QuarticBoundaryPotential, SmoothRelu
    suite = PotentialSuite(lam=lam, V=CubicCutoffPotential(1e-3), U=QuarticBoundaryPotential(1.5),
                           kappa=QuadraticKernel(0.5 if viscous else 0.0), r=SmoothRelu(0.2))
    return NccGains(mu1=0.4, mu2=1.0 / v_max, clf=ClfParams(1.0, 1.0), suite=suite)


def default_prcc_gains(viscous: bool, lam: float = 25.0, v_max: float = 35.0) -> PrccGains:
    """Pseudo-relativistic controller with the reference parameter set."""
    from .potentials import CubicCutoffPotential, Linear, QuadraticKernel, QuarticBoundaryPotential
    scale = 1.0 / v_max ** 2
    suite = PotentialSuite(lam=lam, V=CubicCutoffPotential(1e-3 * scale),
                           U=QuarticBoundaryPotential(1.5),
                           kappa=QuadraticKernel(0.5 * scale if viscous else 0.0),
                           f1=Linear(scale), f2=Linear(0.4))
    return PrccGains(clf=ClfParams(1.0, 1.0), suite=suite)


__all__ = [
    "NccGains", "PrccGains", "NccTerms", "PrccTerms", "ncc_terms", "ncc_controls", "ncc_lambda",
    "ncc_gain_k", "ncc_control", "prcc_q", "prcc_beta", "prcc_a", "prcc_terms", "prcc_controls",
    "prcc_control", "default_ncc_gains", "default_prcc_gains",
]
