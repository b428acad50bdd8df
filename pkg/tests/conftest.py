import numpy as np
import pytest

from trafficfluid.fleet import FleetState, PairMatrix, RoadSpec, in_state_space
from trafficfluid.microsim import reference_loop

ROAD = RoadSpec(half_width=7.2, v_max=35.0, v_star=30.0, phi=0.25)


def random_admissible(rng, n, road=ROAD, pairs=None, x_span=12.0, y_frac=0.97, th_frac=0.97,
                      v_lo=0.02, v_hi=0.98):
    """Rejection-sample a state that reaches close to every boundary of the state space."""
    pairs = pairs if pairs is not None else PairMatrix.uniform(n, 5.11, 5.59)
    while True:
        st = FleetState(rng.uniform(0.0, x_span * n, n),
                        rng.uniform(-y_frac, y_frac, n) * road.half_width,
                        rng.uniform(-th_frac, th_frac, n) * road.phi,
                        rng.uniform(v_lo, v_hi, n) * road.v_max)
        if in_state_space(st, road, pairs).ok:
            return st


def column(n, spacing, v=30.0, road=ROAD):
    x = -spacing * np.arange(n, dtype=float)
    return FleetState(x, np.zeros(n), np.zeros(n), np.full(n, float(v)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(params=[("NCC", False), ("NCC", True), ("PRCC", False), ("PRCC", True)],
                ids=["ncc-inviscid", "ncc-viscous", "prcc-inviscid", "prcc-viscous"])
def loop4(request):
    fam, visc = request.param
    return reference_loop(fam, visc, n=4)


# -- acceptance verdict lines --------------------------------------------------------

_VERDICTS: dict = {}


@pytest.fixture
def verdict():
    """Record ``(criterion, passed, detail)``; printed together at the end of the session."""
    def record(number: int, title: str, passed: bool, detail: str = "") -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}"
        if detail:
            line += f"  ({detail})"
        _VERDICTS[number] = line
        print(line)
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(_VERDICTS):
            terminalreporter.write_line(_VERDICTS[number])
