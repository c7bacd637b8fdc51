import pytest

from cdanse.fem import MixedSpace
from cdanse.mesh import build_uniform_triangulation

# criterion label -> (passed, detail); printed once at the end of the session
ACCEPTANCE = {}


def record(label, passed, detail=""):
    ACCEPTANCE[label] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[label]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {label}: {detail}")


@pytest.fixture(scope="session")
def space8():
    return MixedSpace(build_uniform_triangulation(8))


@pytest.fixture(scope="session")
def space16():
    return MixedSpace(build_uniform_triangulation(16))
