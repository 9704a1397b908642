import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from quadmap.geometry import CameraView, EllipsoidParams
from quadmap.selftest import K_DEFAULT, look_at

settings.register_profile(
    "repo", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow], derandomize=True
)
settings.load_profile("repo")


@pytest.fixture
def car():
    return EllipsoidParams([2.0, 0.75, 0.85], [0.3, -0.75, 0.2], [0.0, 0.05, 0.0])


@pytest.fixture
def front_view():
    return CameraView.from_Rt(K_DEFAULT, np.eye(3), [0.0, 1.65, 10.0])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def arc_views(target, n=5, radius=10.0, arc_deg=18.0):
    phis = np.deg2rad(np.linspace(-arc_deg / 2, arc_deg / 2, n))
    return [look_at(K_DEFAULT, [radius * np.sin(p), -1.65, -radius * np.cos(p)], target) for p in phis]


# --- acceptance reporting --------------------------------------------------

_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record ``criterion(n, passed, detail)`` for the end-of-run summary."""

    def record(n: int, passed: bool, detail: str) -> bool:
        _CRITERIA[n] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(_CRITERIA.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
