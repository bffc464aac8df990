import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fracfilter import solver as S
from fracfilter.mesh import FractureSpec, build_dof_map, build_mesh

settings.register_profile(
    "default", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("default")


def strip_tagger(side, x, y):
    if side in ("left", "right") and y < 0.2:
        return f"{side}_strip"
    return "wall"


TC1_BC = S.BoundaryData({"left_strip": 0.0, "right_strip": 1.0}, frozenset({"wall"}), (1.0, 0.0))


@pytest.fixture(scope="session")
def tc1_small():
    """Test Case 1 geometry at h = 1/10."""
    mesh = build_mesh(20, 10, (2.0, 1.0), FractureSpec(1.0, 0.001), tagger=strip_tagger)
    dofs = build_dof_map(mesh)
    return mesh, dofs, S.Discretization(mesh, dofs, TC1_BC)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA_LINES = []


@pytest.fixture(scope="session")
def criterion_report():
    """Collects one summary line per acceptance criterion."""
    def report(number, passed, detail):
        line = f"criterion {number!s:>3}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA_LINES.append(line)
        print(line)
        return passed
    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        def order(line):
            tag = line.split()[1].rstrip(":")
            return (0, int(tag), "") if tag.isdigit() else (1, 0, tag)

        for line in sorted(CRITERIA_LINES, key=order):
            terminalreporter.write_line(line)
