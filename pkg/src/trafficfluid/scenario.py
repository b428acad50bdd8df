"""Scenario files: YAML documents describing one micro run, macro run or comparison.

Files are composed to YAML nodes rather than loaded directly so that every
error can point at the offending line. Unknown keys are rejected. All numbers
are read as 64-bit floats, including forms such as ``1e-3`` that YAML 1.1
would otherwise leave as strings.

Three document kinds exist, selected by the top-level ``kind`` key:

``micro``
    ``road``, ``fleet``, ``potentials``, ``controller``, ``initial``, ``integrator``
``macro``
    ``model``, ``grid``, ``initial``, ``run``
``compare``
    ``model``, ``profile``, ``compare``

See the bundled files in ``trafficfluid/scenarios`` for complete examples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .controllers import NccGains, PrccGains
from .energy import ClfParams
from .fleet import FleetState, PairMatrix, RoadSpec, in_state_space, validate_scenario
from .macro import Grid, MacroField, MacroParams, Profile, map_micro_to_macro
from .microsim import (ClosedLoop, IntegratorConfig, LongitudinalParams, equilibrium_state,
                       random_initial_state)
from .potentials import (CubicCutoffPotential, Linear, PotentialSuite, QuadraticKernel,
                         QuarticBoundaryPotential, SmoothRelu, validate_suite)


class ScenarioError(ValueError):
    """Invalid scenario file; ``line`` is 1-based or ``None`` when not tied to a line."""

    def __init__(self, message: str, line: int | None = None, source: str = "<scenario>"):
        self.message = message
        self.line = line
        self.source = source
        where = f"{source}:{line}" if line is not None else source
        super().__init__(f"{where}: {message}")


# -- node access -----------------------------------------------------------------

class _Section:
    """A YAML mapping whose keys are consumed by typed getters."""

    def __init__(self, node, path: str, source: str):
        if not isinstance(node, yaml.MappingNode):
            raise ScenarioError(f"'{path or 'document'}' must be a mapping", _line(node), source)
        self.node = node
        self.path = path
        self.source = source
        self.items = {}
        for k, v in node.value:
            if not isinstance(k, yaml.ScalarNode):
                raise ScenarioError("mapping keys must be plain names", _line(k), source)
            if k.value in self.items:
                raise ScenarioError(f"duplicate key '{self._name(k.value)}'", _line(k), source)
            self.items[k.value] = (k, v)
        self.used = set()

    def _name(self, key):
        return f"{self.path}.{key}" if self.path else key

    def error(self, message, key=None):
        line = _line(self.items[key][1]) if key in self.items else _line(self.node)
        raise ScenarioError(message, line, self.source)

    def has(self, key) -> bool:
        return key in self.items

    def raw(self, key):
        self.used.add(key)
        return self.items[key][1]

    def section(self, key, required=True):
        if key not in self.items:
            if required:
                self.error(f"missing section '{self._name(key)}'")
            return None
        return _Section(self.raw(key), self._name(key), self.source)

    def number(self, key, default=None, *, positive=False, integer=False):
        if key not in self.items:
            if default is None:
                self.error(f"missing key '{self._name(key)}'")
            return default
        node = self.raw(key)
        val = _to_float(node, self._name(key), self.source)
        if integer:
            if val != math.floor(val):
                self.error(f"'{self._name(key)}' must be an integer", key)
            val = int(val)
        if positive and not val > 0:
            self.error(f"'{self._name(key)}' must be positive", key)
        return val

    def text(self, key, default=None, choices=None):
        if key not in self.items:
            if default is None:
                self.error(f"missing key '{self._name(key)}'")
            return default
        node = self.raw(key)
        if not isinstance(node, yaml.ScalarNode):
            self.error(f"'{self._name(key)}' must be a single value", key)
        val = str(node.value)
        if choices is not None and val not in choices:
            self.error(f"'{self._name(key)}' must be one of {', '.join(choices)}; got '{val}'", key)
        return val

    def numbers(self, key, default=None):
        """A float or a (possibly nested) list of floats, returned as an array."""
        if key not in self.items:
            if default is None:
                self.error(f"missing key '{self._name(key)}'")
            return np.asarray(default, dtype=float)
        return np.asarray(_to_floats(self.raw(key), self._name(key), self.source), dtype=float)

    def finish(self):
        extra = [k for k in self.items if k not in self.used]
        if extra:
            k = extra[0]
            raise ScenarioError(f"unknown key '{self._name(k)}'", _line(self.items[k][0]), self.source)


def _line(node):
    return node.start_mark.line + 1 if node is not None and node.start_mark is not None else None


def _to_float(node, name, source):
    if not isinstance(node, yaml.ScalarNode):
        raise ScenarioError(f"'{name}' must be a number", _line(node), source)
    try:
        return float(node.value)
    except ValueError:
        raise ScenarioError(f"'{name}' must be a number, got '{node.value}'", _line(node), source) from None


def _to_floats(node, name, source):
    if isinstance(node, yaml.SequenceNode):
        return [_to_floats(item, name, source) for item in node.value]
    return _to_float(node, name, source)


# -- scenario records --------------------------------------------------------------

@dataclass
class MicroScenario:
    name: str
    road: RoadSpec
    pairs: PairMatrix
    sigma: np.ndarray
    gains: object
    initial: FleetState
    integrator: IntegratorConfig
    resolved: dict

    @property
    def loop(self) -> ClosedLoop:
        return ClosedLoop(self.road, self.pairs, self.gains)


@dataclass
class MacroScenario:
    name: str
    family: str
    params: MacroParams
    field: MacroField
    t_end: float
    dt: float | None
    snapshots: tuple
    form: str
    resolved: dict


@dataclass
class CompareScenario:
    name: str
    family: str
    longitudinal: LongitudinalParams
    mass: float
    profile: Profile
    n_list: tuple
    times: tuple
    cells: int
    micro_dt: float | None
    resolved: dict = field(default_factory=dict)


# -- loading -----------------------------------------------------------------------

BUNDLED = "scenarios"


def bundled_names() -> list[str]:
    root = resources.files("trafficfluid").joinpath(BUNDLED)
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def resolve_path(ref: str) -> Path:
    """A filesystem path, or the name of a bundled scenario (with or without ``.yaml``)."""
    p = Path(ref)
    if p.exists():
        return p
    name = ref[:-5] if ref.endswith(".yaml") else ref
    candidate = resources.files("trafficfluid").joinpath(BUNDLED, name + ".yaml")
    if candidate.is_file():
        return Path(str(candidate))
    raise ScenarioError(f"no such scenario file or bundled scenario '{ref}'", None, ref)


def load_scenario(ref: str, seed: int | None = None):
    """Parse and validate a scenario; ``seed`` overrides the initial-state generator seed."""
    path = resolve_path(ref)
    source = str(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read file: {exc.strerror}", None, source) from None
    try:
        root = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ScenarioError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", line, source) from None
    if root is None:
        raise ScenarioError("empty scenario file", 1, source)
    doc = _Section(root, "", source)
    kind = doc.text("kind", choices=("micro", "macro", "compare"))
    name = doc.text("name", default=path.stem)
    loader = {"micro": _load_micro, "macro": _load_macro, "compare": _load_compare}[kind]
    scen = loader(doc, name, seed)
    doc.finish()
    scen.resolved = {"kind": kind, "name": name, **scen.resolved}
    return scen


def _load_road(sec: _Section) -> RoadSpec:
    road = RoadSpec(half_width=sec.number("half_width"), v_max=sec.number("v_max"),
                    v_star=sec.number("v_star", 30.0), phi=sec.number("phi", 0.25))
    sec.finish()
    return road


def _pair_values(sec, key, n, default):
    vals = sec.numbers(key, default)
    if vals.ndim == 0:
        mat = np.full((n, n), float(vals))
    elif vals.shape == (n, n):
        mat = vals.copy()
    else:
        sec.error(f"'{sec._name(key)}' must be a number or an {n}x{n} matrix", key)
    np.fill_diagonal(mat, 0.0 if key == "L" else 1.0)
    return mat


def _load_micro(doc: _Section, name: str, seed: int | None) -> MicroScenario:
    road_sec = doc.section("road")
    road = _load_road(road_sec)

    fleet = doc.section("fleet")
    n = fleet.number("n", integer=True)
    if n < 1:
        fleet.error("'fleet.n' must be at least 1", "n")
    sigma = fleet.numbers("sigma", 4.0)
    sigma = np.full(n, float(sigma)) if sigma.ndim == 0 else sigma
    if sigma.shape != (n,) or np.any(sigma <= 0):
        fleet.error("'fleet.sigma' must be positive (one value or one per vehicle)", "sigma")
    pairs = PairMatrix(_pair_values(fleet, "p", n, 5.11), _pair_values(fleet, "L", n, 5.59))
    fleet.finish()

    ctrl = doc.section("controller")
    family = ctrl.text("family", choices=("NCC", "PRCC"))
    variant = ctrl.text("variant", choices=("viscous", "inviscid"))
    clf = ClfParams(A=ctrl.number("A", 1.0), b=ctrl.number("b", 1.0))
    if family == "NCC":
        mu1 = ctrl.number("mu1", 0.4)
        mu2 = ctrl.number("mu2", 1.0 / road.v_max if road.v_max > 0 else 1.0)
    else:
        for key in ("mu1", "mu2"):
            if ctrl.has(key):
                ctrl.error(f"'controller.{key}' applies to the NCC family only", key)
    ctrl.finish()

    pot = doc.section("potentials")
    prcc_scale = 1.0 / road.v_max ** 2 if family == "PRCC" else 1.0
    lam = pot.number("lambda", positive=True)
    lam_line = _line(pot.items["lambda"][1])
    q1 = pot.number("q1", 1e-3 * prcc_scale, positive=True)
    q2_default = 0.5 * prcc_scale if variant == "viscous" else 0.0
    q2 = pot.number("q2", q2_default)
    if variant == "inviscid" and q2 != 0.0:
        pot.error("'potentials.q2' must be 0 for the inviscid variant", "q2")
    if variant == "viscous" and not q2 > 0:
        pot.error("'potentials.q2' must be positive for the viscous variant", "q2")
    c = pot.number("c", 1.5)
    if family == "NCC":
        eps = pot.number("eps", 0.2, positive=True)
        for key in ("f1", "f2"):
            if pot.has(key):
                pot.error(f"'potentials.{key}' applies to the PRCC family only", key)
        suite = PotentialSuite(lam=lam, V=CubicCutoffPotential(q1), U=QuarticBoundaryPotential(c),
                               kappa=QuadraticKernel(q2), r=SmoothRelu(eps))
        extra = {"eps": eps}
    else:
        f1 = pot.number("f1", prcc_scale, positive=True)
        f2 = pot.number("f2", 0.4, positive=True)
        if pot.has("eps"):
            pot.error("'potentials.eps' applies to the NCC family only", "eps")
        suite = PotentialSuite(lam=lam, V=CubicCutoffPotential(q1), U=QuarticBoundaryPotential(c),
                               kappa=QuadraticKernel(q2), f1=Linear(f1), f2=Linear(f2))
        extra = {"f1": f1, "f2": f2}
    pot.finish()
    if not c > 1:
        raise ScenarioError("boundary potential needs c > 1", _line(pot.node), doc.source)

    gains_map = {"A": clf.A, "b": clf.b}
    if family == "NCC":
        gains_map.update(mu1=mu1, mu2=mu2)
    res = validate_scenario(road, pairs, gains_map, lam)
    if not res.ok:
        first = res.failures[0]
        line = lam_line if "lambda" in first else _line(road_sec.node)
        raise ScenarioError("; ".join(res.failures), line, doc.source)
    rep = validate_suite(suite, pairs.max_L(), road.half_width, road.v_max)
    if not rep.ok:
        raise ScenarioError("potential axioms fail: " + ", ".join(ch.name for ch in rep.failed()),
                            _line(pot.node), doc.source)
    gains = (NccGains(mu1, mu2, clf, suite) if family == "NCC" else PrccGains(clf, suite))

    init = doc.section("initial")
    init_info = {}
    if init.has("generator"):
        gen = init.section("generator")
        gen_kind = gen.text("type", "random", choices=("random", "equilibrium"))
        spacing = gen.number("spacing", 25.0, positive=True)
        if gen_kind == "random":
            jitter = gen.number("jitter", 5.0)
            s = gen.number("seed", 0.0, integer=True)
            if s < 0:
                gen.error("'initial.generator.seed' must be non-negative", "seed")
            if seed is not None:
                s = int(seed)
            try:
                initial = random_initial_state(n, road, pairs, suite, s, spacing, jitter)
            except RuntimeError as exc:
                gen.error(str(exc))
            init_info = {"generator": "random", "seed": s, "spacing": spacing, "jitter": jitter}
        else:
            initial = equilibrium_state(n, road, spacing)
            init_info = {"generator": "equilibrium", "spacing": spacing}
        gen.finish()
    else:
        cols = {}
        for key in ("x", "y", "theta", "v"):
            arr = init.numbers(key)
            if arr.shape != (n,):
                init.error(f"'initial.{key}' must list {n} values", key)
            cols[key] = arr
        initial = FleetState(cols["x"], cols["y"], cols["theta"], cols["v"])
        init_info = {"explicit": True}
    init.finish()
    adm = in_state_space(initial, road, pairs)
    if not adm.ok:
        raise ScenarioError(f"initial state is not admissible: {adm.violations[0]}",
                            _line(init.node), doc.source)

    integ = doc.section("integrator")
    try:
        cfg = IntegratorConfig(dt=integ.number("dt", 1e-3), t_end=integ.number("t_end"),
                               method=integ.text("method", "rk4", choices=("rk4", "rk45")),
                               rtol=integ.number("rtol", 1e-8),
                               record_every=integ.number("record_every", 100.0, integer=True))
    except ValueError as exc:
        integ.error(str(exc))
    integ.finish()

    resolved = {
        "road": {"half_width": road.half_width, "v_max": road.v_max, "v_star": road.v_star,
                 "phi": road.phi},
        "fleet": {"n": n, "sigma": sigma.tolist(), "p": pairs.p.tolist(), "L": pairs.L.tolist()},
        "controller": {"family": family, "variant": variant, **gains_map},
        "potentials": {"lambda": lam, "q1": q1, "q2": q2, "c": c, **extra},
        "initial": init_info,
        "integrator": {"dt": cfg.dt, "t_end": cfg.t_end, "method": cfg.method, "rtol": cfg.rtol,
                       "record_every": cfg.record_every},
    }
    return MicroScenario(name, road, pairs, sigma, gains, initial, cfg, resolved)


def _load_model(sec: _Section):
    """Single-file platoon data shared by macro and compare scenarios."""
    family = sec.text("family", choices=("NCC", "PRCC"))
    L = sec.number("L", positive=True)
    lam = sec.number("lambda", positive=True)
    m = sec.number("mass", positive=True)
    v_max = sec.number("v_max", 35.0, positive=True)
    v_star = sec.number("v_star", 30.0, positive=True)
    q1 = sec.number("q1", positive=True)
    q2 = sec.number("q2", 0.0)
    f_slope = sec.number("f", 1.0 / v_max ** 2 if family == "PRCC" else 1.0, positive=True)
    gamma = sec.number("gamma", 1.0 / v_max, positive=True)
    eps = sec.number("eps", 0.2, positive=True)
    z = sec.number("z", 0.0)
    sec.finish()
    if not lam > L:
        sec.error("interaction radius constraint lambda > L", "lambda")
    if not v_star < v_max:
        sec.error("set-point constraint 0 < v* < v_max", "v_star")
    if q2 < 0:
        sec.error("'model.q2' must be non-negative", "q2")
    resolved = {"family": family, "L": L, "lambda": lam, "mass": m, "v_max": v_max,
                "v_star": v_star, "q1": q1, "q2": q2, "f": f_slope, "gamma": gamma, "eps": eps,
                "z": z}
    shapes = dict(Phi=CubicCutoffPotential(q1), K=QuadraticKernel(q2), f=Linear(f_slope),
                  g=Linear(1.0), gamma=gamma, r=SmoothRelu(eps))
    return family, m, z, resolved, shapes


def _bump(sec: _Section, what: str):
    """``base + amplitude * exp(-((x - center) / width)^2)``."""
    base = sec.number("base")
    amp = sec.number("amplitude", 0.0)
    center = sec.number("center", 0.0)
    width = sec.number("width", 1.0, positive=True)
    sec.finish()

    def fn(x):
        x = np.asarray(x, dtype=float)
        return base + amp * np.exp(-((x - center) / width) ** 2)

    return fn, {"base": base, "amplitude": amp, "center": center, "width": width}


def _load_macro(doc: _Section, name: str, seed: int | None) -> MacroScenario:
    model = doc.section("model")
    family, m, z, model_res, shapes = _load_model(model)
    L, lam = model_res["L"], model_res["lambda"]
    try:
        params = map_micro_to_macro(shapes["Phi"], shapes["K"], m, L, lam, family,
                                    v_max=model_res["v_max"], v_star=model_res["v_star"],
                                    f=shapes["f"], g=shapes["g"], gamma=shapes["gamma"],
                                    r=shapes["r"], z=z)
    except ValueError as exc:
        model.error(str(exc))

    gsec = doc.section("grid")
    try:
        grid = Grid(gsec.number("x_min"), gsec.number("x_max"),
                    gsec.number("cells", integer=True),
                    gsec.text("boundary", "periodic", choices=("periodic", "inflow")))
    except ValueError as exc:
        gsec.error(str(exc))
    gsec.finish()

    init = doc.section("initial")
    rho_fn, rho_res = _bump(init.section("rho"), "rho")
    v_fn, v_res = _bump(init.section("v"), "v")
    init.finish()
    xc = grid.centers
    fld = MacroField(grid, rho_fn(xc), v_fn(xc))
    if np.any(fld.rho <= 0) or np.any(fld.rho >= params.rho_max):
        init.error(f"initial density must lie in (0, rho_max = {params.rho_max:.6g})")
    if np.any(fld.v <= 0) or np.any(fld.v >= params.v_max):
        init.error("initial speed must lie in (0, v_max)")

    run = doc.section("run")
    t_end = run.number("t_end", positive=True)
    dt = run.number("dt", 0.0)
    dt = dt if dt > 0 else None
    snaps = tuple(float(s) for s in np.atleast_1d(run.numbers("snapshots", [t_end])))
    if any(not 0 <= s <= t_end for s in snaps):
        run.error("snapshot times must lie in [0, t_end]", "snapshots")
    form = run.text("form", "speed", choices=("speed", "transformed"))
    if form == "transformed" and family != "PRCC":
        run.error("the transformed form exists for the PRCC family only", "form")
    run.finish()

    resolved = {"model": model_res, "grid": {"x_min": grid.x_min, "x_max": grid.x_max,
                                             "cells": grid.cells, "boundary": grid.boundary},
                "initial": {"rho": rho_res, "v": v_res},
                "run": {"t_end": t_end, "dt": dt, "snapshots": list(snaps), "form": form},
                "derived": {"rho_max": params.rho_max, "rho_bar": params.rho_bar}}
    return MacroScenario(name, family, params, fld, t_end, dt, snaps, form, resolved)


def _load_compare(doc: _Section, name: str, seed: int | None) -> CompareScenario:
    model = doc.section("model")
    family, m, z, model_res, shapes = _load_model(model)
    if z != 0.0:
        model.error("the comparison harness uses z = 0", "z")
    try:
        prm = LongitudinalParams(L=model_res["L"], lam=model_res["lambda"], v_max=model_res["v_max"],
                                 v_star=model_res["v_star"], **shapes)
    except ValueError as exc:
        model.error(str(exc), "lambda")

    prof = doc.section("profile")
    x_lo = prof.number("x_lo")
    x_hi = prof.number("x_hi")
    if not x_hi > x_lo:
        prof.error("'profile.x_hi' must exceed 'profile.x_lo'", "x_hi")
    rho_fn, rho_res = _bump(prof.section("rho"), "rho")
    v_fn, v_res = _bump(prof.section("v"), "v")
    prof.finish()

    cmp_ = doc.section("compare")
    n_arr = np.atleast_1d(cmp_.numbers("n", [50, 100, 200]))
    if np.any(n_arr < 2) or np.any(n_arr != np.floor(n_arr)):
        cmp_.error("'compare.n' must list integers >= 2", "n")
    times = tuple(float(t) for t in np.atleast_1d(cmp_.numbers("times", [1.0])))
    if any(not t > 0 for t in times):
        cmp_.error("'compare.times' must be positive", "times")
    cells = cmp_.number("cells", 2000.0, integer=True)
    micro_dt = cmp_.number("micro_dt", 0.0)
    cmp_.finish()

    resolved = {"model": model_res,
                "profile": {"x_lo": x_lo, "x_hi": x_hi, "rho": rho_res, "v": v_res},
                "compare": {"n": [int(k) for k in n_arr], "times": list(times), "cells": cells,
                            "micro_dt": micro_dt if micro_dt > 0 else None}}
    return CompareScenario(name, family, prm, m, Profile(rho_fn, v_fn, x_lo, x_hi),
                           tuple(int(k) for k in n_arr), times, cells,
                           micro_dt if micro_dt > 0 else None, resolved)


__all__ = ["ScenarioError", "MicroScenario", "MacroScenario", "CompareScenario", "load_scenario",
           "resolve_path", "bundled_names"]
