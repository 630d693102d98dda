import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from octokit import benchgen
from octokit.env import Scene, gen_scene

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def open_scene(w=20, h=20, res=0.1, objects=(), seed=0):
    """Empty room with a one-cell wall border."""
    grid = np.zeros((h, w), dtype=bool)
    grid[1:-1, 1:-1] = True
    return Scene(grid, res, tuple(objects), seed)


@pytest.fixture(scope="session")
def scene():
    return gen_scene(7)


@pytest.fixture(scope="session")
def small_dataset():
    scenes = [gen_scene(101), gen_scene(102)]
    eps = benchgen.generate_episodes(scenes, 16, seed=5)
    return {s.scene_id: s for s in scenes}, eps


_acceptance = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria")


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1][len("test_criterion_"):]
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or report.when == "call":
        _acceptance[name] = "FAIL" if failed or _acceptance.get(name) == "FAIL" else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        num, _, label = name.partition("_")
        terminalreporter.write_line(f"criterion {int(num):2d} {label.replace('_', ' ')}: {_acceptance[name]}")
