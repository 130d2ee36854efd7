import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from armplan.kinematics import load_robot  # noqa: E402


@pytest.fixture(scope="session")
def ur5():
    return load_robot("ur5")


@pytest.fixture(scope="session")
def kr16():
    return load_robot("kr16")


@pytest.fixture(params=["ur5", "kr16"], scope="session")
def robot(request):
    return load_robot(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def dh_tuples(model):
    return [(r.theta_offset, r.d, r.a, r.alpha) for r in model.dh_rows]


ACCEPTANCE = {}
CRITERIA = {
    1: "kinematics fidelity", 2: "IK convergence", 3: "Jacobian vs finite differences",
    4: "sensor layout", 5: "reward oracle", 6: "curriculum", 7: "gradient checks",
    8: "training smoke (reach)", 9: "obstacle training smoke", 10: "baseline validity",
    11: "dynamic-obstacle contrast", 12: "benchmark report",
}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE.get("ran"):
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n, title in CRITERIA.items():
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:>2} {title:<32} {'PASS' if ok else 'FAIL'}  {detail}")
