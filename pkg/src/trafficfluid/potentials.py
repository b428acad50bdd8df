"""Scalar shaping functions used by both controller families.

Every shape returns ``(value, derivative)`` and is vectorised over numpy
arrays. The parametric families are the defaults; ``Tabulated`` wraps a cubic
spline for user-supplied data.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .fleet import DomainError

# distance to a singular boundary below which evaluation is refused
BOUNDARY_GUARD = 1e-12


# -- pair potential V ------------------------------------------------------

@dataclass(frozen=True)
class CubicCutoffPotential:
    """``q1 * (lam - d)**3 / (d - L)`` on ``(L, lam]``, zero beyond ``lam``."""

    q1: float

    def __call__(self, d, L, lam):
        d = np.asarray(d, dtype=float)
        inside = d < lam
        dd = np.where(inside, d, lam)
        gap = lam - dd
        off = dd - L
        off = np.where(inside, off, 1.0)
        val = np.where(inside, self.q1 * gap ** 3 / off, 0.0)
        der = np.where(inside, -self.q1 * (3.0 * gap ** 2 / off + gap ** 3 / off ** 2), 0.0)
        return val, der

    def second_derivative(self, d, L, lam):
        d = np.asarray(d, dtype=float)
        inside = d < lam
        dd = np.where(inside, d, lam)
        gap = lam - dd
        off = np.where(inside, dd - L, 1.0)
        sec = self.q1 * (6.0 * gap / off + 6.0 * gap ** 2 / off ** 2 + 2.0 * gap ** 3 / off ** 3)
        return np.where(inside, sec, 0.0)


# -- boundary potential U --------------------------------------------------

@dataclass(frozen=True)
class QuarticBoundaryPotential:
    """``(1/(a^2-y^2) - c/a^2)**4`` outside the flat zone, zero inside it."""

    c: float = 1.5

    def flat_edge(self, a):
        return a * math.sqrt((self.c - 1.0) / self.c)

    def __call__(self, y, a):
        y = np.asarray(y, dtype=float)
        edge = self.flat_edge(a)
        outside = np.abs(y) > edge
        ys = np.where(outside, y, 0.0)
        den = a * a - ys * ys
        inner = np.where(outside, 1.0 / den - self.c / (a * a), 0.0)
        val = inner ** 4
        der = np.where(outside, 4.0 * inner ** 3 * 2.0 * ys / den ** 2, 0.0)
        return val, der


# -- viscosity kernel kappa -------------------------------------------------

@dataclass(frozen=True)
class QuadraticKernel:
    """``q2 * (lam - d)**2`` below ``lam``, zero beyond."""

    q2: float

    def __call__(self, d, L, lam):
        d = np.asarray(d, dtype=float)
        inside = d < lam
        gap = np.where(inside, lam - d, 0.0)
        return self.q2 * gap ** 2, -2.0 * self.q2 * gap


# -- one-dimensional shapes ---------------------------------------------------

@dataclass(frozen=True)
class SmoothRelu:
    """C^1 majorant of ``max(0, x)`` with a quadratic blend of width ``eps``."""

    eps: float = 0.2

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        e = self.eps
        mid = (x > -e) & (x < 0)
        val = np.where(x >= 0, (e * e + 2.0 * e * x) / (2.0 * e),
                       np.where(mid, (x + e) ** 2 / (2.0 * e), 0.0))
        der = np.where(x >= 0, 1.0, np.where(mid, (x + e) / e, 0.0))
        return val, der


@dataclass(frozen=True)
class Linear:
    gain: float = 1.0

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.gain * x, np.full_like(x, self.gain)


@dataclass(frozen=True)
class FunctionShape:
    """Arbitrary user function; derivative by central difference if not given."""

    func: Callable
    deriv: Callable | None = None

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        val = np.asarray(self.func(x), dtype=float)
        if self.deriv is not None:
            der = np.asarray(self.deriv(x), dtype=float)
        else:
            h = 1e-6 * np.maximum(1.0, np.abs(x))
            der = (np.asarray(self.func(x + h)) - np.asarray(self.func(x - h))) / (2 * h)
        return val, der


@dataclass(frozen=True)
class Tabulated:
    """Cubic-spline interpolant of tabulated ``(xs, ys)``.

    Outside the table the value is held at ``outside`` (with zero slope) when
    given, otherwise the spline is extrapolated.
    """

    xs: tuple
    ys: tuple
    outside: float | None = None
    _spline: CubicSpline = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_spline", CubicSpline(np.asarray(self.xs, float),
                                                        np.asarray(self.ys, float)))

    def __call__(self, x, *_):
        x = np.asarray(x, dtype=float)
        val = self._spline(x)
        der = self._spline(x, 1)
        if self.outside is not None:
            out = (x < self.xs[0]) | (x > self.xs[-1])
            val = np.where(out, self.outside, val)
            der = np.where(out, 0.0, der)
        return val, der


# -- suite -------------------------------------------------------------------

@dataclass(frozen=True)
class PotentialSuite:
    """All shaping functions of one controller, immutable once built."""

    lam: float
    V: object = CubicCutoffPotential(1e-3)
    U: object = QuarticBoundaryPotential(1.5)
    kappa: object = QuadraticKernel(0.0)
    r: object = SmoothRelu(0.2)
    f1: object = Linear(1.0)
    f2: object = Linear(1.0)
    g1: object = Linear(1.0)
    g2: object = Linear(1.0)

    @property
    def parametric(self) -> bool:
        """True when every slot is one of the closed-form default families."""
        return (isinstance(self.V, CubicCutoffPotential)
                and isinstance(self.U, QuarticBoundaryPotential)
                and isinstance(self.kappa, QuadraticKernel)
                and isinstance(self.r, SmoothRelu)
                and all(isinstance(s, Linear) for s in (self.f1, self.f2))
                and all(isinstance(s, Linear) and s.gain == 1.0 for s in (self.g1, self.g2)))

    @property
    def viscous(self) -> bool:
        return not (isinstance(self.kappa, QuadraticKernel) and self.kappa.q2 == 0.0)


def eval_V(suite: PotentialSuite, d, L):
    d = np.asarray(d, dtype=float)
    if np.any(d - L <= BOUNDARY_GUARD):
        raise DomainError("pair potential evaluated at or below the minimum separation")
    return suite.V(d, L, suite.lam)


def eval_U(suite: PotentialSuite, y, a):
    y = np.asarray(y, dtype=float)
    if np.any(a - np.abs(y) <= BOUNDARY_GUARD):
        raise DomainError("boundary potential evaluated on or beyond the road edge")
    return suite.U(y, a)


def eval_kappa(suite: PotentialSuite, d, L):
    d = np.asarray(d, dtype=float)
    if np.any(d - L <= BOUNDARY_GUARD):
        raise DomainError("viscosity kernel evaluated at or below the minimum separation")
    return suite.kappa(d, L, suite.lam)


def eval_r(suite: PotentialSuite, x):
    return suite.r(x)


# -- axiom checks ---------------------------------------------------------

@dataclass
class AxiomCheck:
    name: str
    passed: bool
    detail: str = ""


@dataclass
class SuiteReport:
    checks: list

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list:
        return [c.name for c in self.checks if not c.passed]

    def __getitem__(self, name) -> AxiomCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)


DIVERGENCE_THRESHOLD = 1e6


def _c1_jump_shrinks(shape, lo, hi, n) -> tuple[bool, float]:
    """Derivative jumps between neighbouring samples must vanish under refinement."""
    jumps = []
    for m in (n, 2 * n, 4 * n):
        xs = np.linspace(lo, hi, m)
        _, der = shape(xs)
        jumps.append(float(np.max(np.abs(np.diff(der)))))
    ok = jumps[2] < 1e-8 or (jumps[2] <= 0.6 * jumps[1] and jumps[1] <= 0.6 * jumps[0])
    return ok, jumps[2]


def validate_suite(suite: PotentialSuite, L: float, a: float, v_max: float = 35.0,
                   grid_resolution: int = 2001) -> SuiteReport:
    """Sample every function on dense grids and test each structural axiom."""
    lam = suite.lam
    N = int(grid_resolution)
    checks = []
    add = lambda name, ok, detail="": checks.append(AxiomCheck(name, bool(ok), detail))

    # pair potential
    near = suite.V(np.array([L + 1e-9]), L, lam)[0][0]
    add("V diverges at L", near > DIVERGENCE_THRESHOLD, f"V(L+1e-9)={near:.3g}")
    far = np.linspace(lam, 3 * lam, N)
    vf, df = suite.V(far, L, lam)
    add("V vanishes beyond lambda", np.all(vf == 0.0) and np.all(df == 0.0))
    inner = np.linspace(L + (lam - L) * 1e-3, lam, N)
    vi, _ = suite.V(inner, L, lam)
    add("V non-negative", np.all(vi >= 0.0))
    add("lambda exceeds L", lam > L)

    # boundary potential
    u0, du0 = suite.U(np.array([0.0]), a)
    add("U vanishes at 0", u0[0] == 0.0, f"U(0)={u0[0]}")
    edge_vals = suite.U(np.array([-a * (1 - 1e-6), a * (1 - 1e-6)]), a)[0]
    add("U diverges at +-a", np.all(edge_vals > DIVERGENCE_THRESHOLD),
        f"U(+-a(1-1e-6))={edge_vals.min():.3g}")
    ys = np.linspace(-a * (1 - 1e-3), a * (1 - 1e-3), N)
    add("U non-negative", np.all(suite.U(ys, a)[0] >= 0.0))

    # kappa
    kf, _ = suite.kappa(far, L, lam)
    add("kappa vanishes beyond lambda", np.all(kf == 0.0))
    ki, _ = suite.kappa(inner, L, lam)
    add("kappa non-negative", np.all(ki >= 0.0))

    # r
    xs = np.linspace(-4.0, 4.0, N)
    rv, _ = suite.r(xs)
    add("r dominates max(0,x)", np.all(rv >= np.maximum(0.0, xs)))
    ok, jump = _c1_jump_shrinks(suite.r, -4.0, 4.0, N)
    add("r in C1", ok, f"max derivative jump {jump:.3g}")

    # g shapes
    gs = np.linspace(-2 * v_max, 2 * v_max, N)
    for name, g in (("g1", suite.g1), ("g2", suite.g2)):
        _, dg = g(gs)
        add(f"{name} strictly increasing", np.all(dg > 0.0))
        ok, jump = _c1_jump_shrinks(g, -2 * v_max, 2 * v_max, N)
        add(f"{name} in C1", ok, f"max derivative jump {jump:.3g}")

    # f shapes
    fs = np.linspace(-2 * v_max, 2 * v_max, N)
    fs = fs[fs != 0.0]
    for name, f in (("f1", suite.f1), ("f2", suite.f2)):
        at0 = f(np.array([0.0]))[0][0]
        fv, _ = f(fs)
        add(f"{name} sign condition", at0 == 0.0 and np.all(fs * fv > 0.0))
    return SuiteReport(checks)
