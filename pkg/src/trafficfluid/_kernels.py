"""Compiled closed-loop kernels for the default (parametric) potential families.

The numpy implementations in ``energy`` and ``controllers`` are the reference;
these kernels repeat the same formulas in compiled loops so that long
fixed-step runs are affordable. ``tests/test_kernels.py`` cross-checks both.

Parameters travel in one float array; see ``PRM_*`` indices below.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

PRM_VSTAR, PRM_VMAX, PRM_COSPHI, PRM_PHI, PRM_A_ROAD = 0, 1, 2, 3, 4
PRM_LAM, PRM_Q1, PRM_Q2, PRM_C, PRM_EPS = 5, 6, 7, 8, 9
PRM_A, PRM_B, PRM_MU1, PRM_MU2, PRM_F1, PRM_F2 = 10, 11, 12, 13, 14, 15
PRM_SIZE = 16

FAMILY_NCC = 0
FAMILY_PRCC = 1

ENERGY_H = 0
ENERGY_HR = 1

# violation codes shared with microsim.GuardEvent kinds
OK = 0
BAD_LATERAL = 1
BAD_HEADING = 2
BAD_SPEED = 3
BAD_SEPARATION = 4
BAD_ENERGY = 5


@njit(cache=True)
def check_state(w, prm, L, P):
    """Return ``(code, i, j, margin)`` of the first violated constraint, code 0 if admissible."""
    n = w.size // 4
    a = prm[PRM_A_ROAD]
    for i in range(n):
        y = w[n + i]
        if not abs(y) < a:
            return BAD_LATERAL, i, -1, a - abs(y)
        th = w[2 * n + i]
        if not abs(th) < prm[PRM_PHI]:
            return BAD_HEADING, i, -1, prm[PRM_PHI] - abs(th)
        v = w[3 * n + i]
        if not v > 0.0:
            return BAD_SPEED, i, -1, v
        if not v < prm[PRM_VMAX]:
            return BAD_SPEED, i, -1, prm[PRM_VMAX] - v
    for i in range(n):
        for j in range(i + 1, n):
            dx = w[i] - w[j]
            dy = w[n + i] - w[n + j]
            d = math.sqrt(dx * dx + P[i, j] * dy * dy)
            if not d > L[i, j]:
                return BAD_SEPARATION, i, j, d - L[i, j]
    return OK, -1, -1, 0.0


@njit(cache=True)
def _pair_sums(w, prm, L, P, fx, fy, visc1, visc2):
    """Accumulate nudging forces and viscous pulls; returns total pair potential."""
    n = w.size // 4
    lam = prm[PRM_LAM]
    q1 = prm[PRM_Q1]
    q2 = prm[PRM_Q2]
    vpot = 0.0
    for i in range(n):
        fx[i] = 0.0
        fy[i] = 0.0
        visc1[i] = 0.0
        visc2[i] = 0.0
    for i in range(n):
        ci = math.cos(w[2 * n + i])
        si = math.sin(w[2 * n + i])
        vi = w[3 * n + i]
        for j in range(i + 1, n):
            dx = w[i] - w[j]
            dy = w[n + i] - w[n + j]
            d = math.sqrt(dx * dx + P[i, j] * dy * dy)
            if d >= lam:
                continue
            gap = lam - d
            off = d - L[i, j]
            vpot += q1 * gap ** 3 / off
            dV = -q1 * (3.0 * gap * gap / off + gap ** 3 / (off * off))
            ax = dV * dx / d
            ay = P[i, j] * dV * dy / d
            fx[i] += ax
            fx[j] -= ax
            fy[i] += ay
            fy[j] -= ay
            if q2 != 0.0:
                kap = q2 * gap * gap
                vj = w[3 * n + j]
                cj = math.cos(w[2 * n + j])
                sj = math.sin(w[2 * n + j])
                d1 = vj * cj - vi * ci
                d2 = vj * sj - vi * si
                visc1[i] += kap * d1
                visc1[j] -= kap * d1
                visc2[i] += kap * d2
                visc2[j] -= kap * d2
    return vpot


@njit(cache=True)
def _boundary(y, a, c):
    edge = a * math.sqrt((c - 1.0) / c)
    if abs(y) <= edge:
        return 0.0, 0.0
    den = a * a - y * y
    inner = 1.0 / den - c / (a * a)
    return inner ** 4, 8.0 * inner ** 3 * y / (den * den)


@njit(cache=True)
def _smooth_relu(x, eps):
    if x >= 0.0:
        return (eps * eps + 2.0 * eps * x) / (2.0 * eps)
    if x > -eps:
        return (x + eps) ** 2 / (2.0 * eps)
    return 0.0


@njit(cache=True)
def controls(w, prm, L, P, family, F, u):
    """Fill ``F`` and ``u`` for every vehicle; also returns the NCC gains in ``k``."""
    n = w.size // 4
    fx = np.empty(n)
    fy = np.empty(n)
    v1 = np.empty(n)
    v2 = np.empty(n)
    k = np.zeros(n)
    _pair_sums(w, prm, L, P, fx, fy, v1, v2)
    vs = prm[PRM_VSTAR]
    vm = prm[PRM_VMAX]
    cphi = prm[PRM_COSPHI]
    A = prm[PRM_A]
    b = prm[PRM_B]
    for i in range(n):
        th = w[2 * n + i]
        v = w[3 * n + i]
        c = math.cos(th)
        s = math.sin(th)
        _, dU = _boundary(w[n + i], prm[PRM_A_ROAD], prm[PRM_C])
        if family == FAMILY_NCC:
            lam_i = fx[i] - v1[i]
            Z = -prm[PRM_MU1] * v * s + v2[i]
            vmc = vm * c
            k[i] = prm[PRM_MU2] + lam_i / vs + vmc * _smooth_relu(-lam_i, prm[PRM_EPS]) / (vs * (vmc - vs))
            F[i] = -(k[i] * (v * c - vs) + lam_i) / c
            den = vs + A / (v * (c - cphi) ** 2) + v * c * (b - 1.0)
            u[i] = (Z - dU - fy[i] - b * s * F[i]) / den
        else:
            R = -prm[PRM_F1] * (v * c - vs) + v1[i]
            G = -prm[PRM_F2] * v * s + v2[i]
            q = (vm * v * c + vs * vm - 2.0 * vs * v) / (2.0 * (vm - v) ** 2 * v * v)
            beta = A / (c - cphi) ** 2 + ((b - 1.0) * v * c + vs) / (vm - v)
            aa = b * vm * s / (2.0 * (vm - v) ** 2 * v)
            F[i] = (R - fx[i]) / q
            u[i] = v / beta * (G - dU - aa * F[i] - fy[i])
    return k


@njit(cache=True)
def rhs(w, prm, L, P, family, out):
    n = w.size // 4
    F = np.empty(n)
    u = np.empty(n)
    controls(w, prm, L, P, family, F, u)
    for i in range(n):
        th = w[2 * n + i]
        v = w[3 * n + i]
        out[i] = v * math.cos(th)
        out[n + i] = v * math.sin(th)
        out[2 * n + i] = u[i]
        out[3 * n + i] = F[i]


@njit(cache=True)
def energy(w, prm, L, P, kind):
    n = w.size // 4
    fx = np.empty(n)
    fy = np.empty(n)
    v1 = np.empty(n)
    v2 = np.empty(n)
    total = _pair_sums(w, prm, L, P, fx, fy, v1, v2)
    vs = prm[PRM_VSTAR]
    vm = prm[PRM_VMAX]
    cphi = prm[PRM_COSPHI]
    b = prm[PRM_B]
    for i in range(n):
        th = w[2 * n + i]
        v = w[3 * n + i]
        c = math.cos(th)
        s = math.sin(th)
        lon = v * c - vs
        num = lon * lon + b * v * v * s * s
        if kind == ENERGY_H:
            total += 0.5 * num
        else:
            total += 0.5 * num / ((vm - v) * v)
        Uv, _ = _boundary(w[n + i], prm[PRM_A_ROAD], prm[PRM_C])
        total += Uv
        total += prm[PRM_A] * (1.0 / (c - cphi) - 1.0 / (1.0 - cphi))
    return total


@njit(cache=True)
def dissipation(w, prm, L, P, family):
    """Delta for PRCC, Gamma for NCC (identity speed shapes)."""
    n = w.size // 4
    lam = prm[PRM_LAM]
    q2 = prm[PRM_Q2]
    total = 0.0
    for i in range(n):
        th = w[2 * n + i]
        v = w[3 * n + i]
        lon = v * math.cos(th) - prm[PRM_VSTAR]
        lat = v * math.sin(th)
        if family == FAMILY_NCC:
            total += prm[PRM_MU2] * lon * lon + prm[PRM_MU1] * lat * lat
        else:
            total += prm[PRM_F1] * lon * lon + prm[PRM_F2] * lat * lat
    if q2 != 0.0:
        for i in range(n):
            for j in range(i + 1, n):
                dx = w[i] - w[j]
                dy = w[n + i] - w[n + j]
                d = math.sqrt(dx * dx + P[i, j] * dy * dy)
                if d >= lam:
                    continue
                kap = q2 * (lam - d) ** 2
                d1 = w[3 * n + j] * math.cos(w[2 * n + j]) - w[3 * n + i] * math.cos(w[2 * n + i])
                d2 = w[3 * n + j] * math.sin(w[2 * n + j]) - w[3 * n + i] * math.sin(w[2 * n + i])
                total += kap * (d1 * d1 + d2 * d2)
    return total


@njit(cache=True)
def rk4_step(w, dt, prm, L, P, family, k1, k2, k3, k4, tmp, out):
    """One classical RK4 step.

    Returns ``(code, i, j, margin)``; a nonzero code means a stage left the state space.
    """
    m = w.size
    rhs(w, prm, L, P, family, k1)
    for q in range(m):
        tmp[q] = w[q] + 0.5 * dt * k1[q]
    code, i, j, margin = check_state(tmp, prm, L, P)
    if code != OK:
        return code, i, j, margin
    rhs(tmp, prm, L, P, family, k2)
    for q in range(m):
        tmp[q] = w[q] + 0.5 * dt * k2[q]
    code, i, j, margin = check_state(tmp, prm, L, P)
    if code != OK:
        return code, i, j, margin
    rhs(tmp, prm, L, P, family, k3)
    for q in range(m):
        tmp[q] = w[q] + dt * k3[q]
    code, i, j, margin = check_state(tmp, prm, L, P)
    if code != OK:
        return code, i, j, margin
    rhs(tmp, prm, L, P, family, k4)
    for q in range(m):
        out[q] = w[q] + dt / 6.0 * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
    return OK, -1, -1, 0.0


@njit(cache=True)
def advance(w, dt, nsteps, prm, L, P, family, energy_kind, e_prev, e_tol):
    """Take up to ``nsteps`` guarded RK4 steps from ``w`` (modified in place).

    Returns ``(steps_done, code, i, j, margin, e_last)``. On a guard failure
    ``w`` holds the last accepted state and ``code`` names the violation.
    """
    m = w.size
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    out = np.empty(m)
    for step in range(nsteps):
        code, i, j, margin = rk4_step(w, dt, prm, L, P, family, k1, k2, k3, k4, tmp, out)
        if code != OK:
            return step, code, i, j, margin, e_prev
        code, i, j, margin = check_state(out, prm, L, P)
        if code != OK:
            return step, code, i, j, margin, e_prev
        e_new = energy(out, prm, L, P, energy_kind)
        if not e_new <= e_prev + e_tol:
            return step, BAD_ENERGY, -1, -1, e_prev + e_tol - e_new, e_prev
        for q in range(m):
            w[q] = out[q]
        e_prev = e_new
    return nsteps, OK, -1, -1, 0.0, e_prev
