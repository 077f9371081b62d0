import numpy as np
import pytest

from objmap.mesh import synthetic_database
from objmap.raster import CameraIntrinsics


@pytest.fixture(scope="session")
def db():
    return synthetic_database()


@pytest.fixture(scope="session")
def K():
    return CameraIntrinsics.default()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: dict = {}


@pytest.fixture
def criterion():
    """Record one summary line per acceptance criterion."""

    def record(name: str, ok: bool, detail: str) -> bool:
        _CRITERIA[name] = f"{name} {'PASS' if ok else 'FAIL'}  {detail}"
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_CRITERIA, key=lambda s: int(s.split("-")[1])):
        terminalreporter.write_line(_CRITERIA[name])
