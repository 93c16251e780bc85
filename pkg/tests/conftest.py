import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from energytree.config import ParallelismConfig, WorkloadConfig, preset
from energytree.simulator import SimParams, gen_dataset, make_grid

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

TINY = ("vicuna-tiny", "mistral-tiny", "llama-tiny", "qwen-tiny")
WORKLOADS = (WorkloadConfig(8, 32, 32), WorkloadConfig(4, 64, 16), WorkloadConfig(16, 16, 64))


@pytest.fixture(scope="session")
def small_tp_dataset():
    """Two archs x TP {1, 2} x three workloads x 12 runs."""
    archs = [preset("vicuna-tiny"), preset("llama-tiny")]
    pars = [ParallelismConfig("TensorParallel", d) for d in (1, 2)]
    return gen_dataset(make_grid(archs, pars, WORKLOADS), 12, SimParams(seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance criteria report --------------------------------------------------

_CRITERIA: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or not (rep.when == "call" or rep.failed):
        return
    number, title = mark.args
    prev = _CRITERIA.get(number, (title, True, 0.0))
    _CRITERIA[number] = (title, prev[1] and rep.passed, prev[2] + rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok, secs = _CRITERIA[number]
        terminalreporter.write_line(
            f"criterion {number:2d}  {'PASS' if ok else 'FAIL'}  {title}  ({secs:.2f}s)")
