import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mfuse.imageio import write_image
from mfuse.metrics import make_synthetic_set

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Four synthetic 64x64 pairs on disk in the <name>_1/_2 layout."""
    d = tmp_path_factory.mktemp("synth")
    for i, (_, p1, p2) in enumerate(make_synthetic_set(4, shape=(64, 64), seed=7)):
        write_image(d / f"pair{i}_1.png", p1)
        write_image(d / f"pair{i}_2.png", p2)
    return d


# -- acceptance reporting: one PASS/FAIL line per criterion ------------------

_CRITERIA: dict[str, bool] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion this test belongs to")


def pytest_runtest_logreport(report):
    name = getattr(report, "criterion", None)
    if name is None:
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    _CRITERIA[name] = _CRITERIA.get(name, True) and not failed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok in _CRITERIA.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}")
