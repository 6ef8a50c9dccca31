import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from rsdpo.reward import PreferenceTriple, RewardModelParams
from rsdpo.toylm import BOS, EOS, N_SPECIAL, SEP, ToyLMParams

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion check")
    config.addinivalue_line("markers", "slow: runs a multi-seed pipeline")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    n, text = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        status = "PASS" if report.outcome == "passed" else "FAIL"
        prev = _criteria.get(n)
        if prev is None or prev[0] == "PASS":
            _criteria[n] = (status, text)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criteria):
        status, text = _criteria[n]
        terminalreporter.write_line(f"criterion {n:>2}: {status}  {text}")


# --- small random fixtures ------------------------------------------------------


def random_prompt(g: np.random.Generator, V: int, max_len: int = 6):
    n = int(g.integers(0, max_len + 1))
    return (BOS, *(int(t) for t in g.integers(N_SPECIAL, V, n)), SEP)


def random_response(g: np.random.Generator, V: int, max_len: int = 6, eos: bool = True):
    n = int(g.integers(1, max_len + 1))
    body = [int(t) for t in g.integers(N_SPECIAL, V, n)]
    if eos:
        body[-1] = EOS
    return tuple(body)


def random_triple(g: np.random.Generator, V: int) -> PreferenceTriple:
    prompt = random_prompt(g, V)
    while True:
        a, b = random_response(g, V), random_response(g, V)
        if a != b:
            return PreferenceTriple(prompt, a, b)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_lm(rng):
    return ToyLMParams.random(8, 2, rng, scale=0.5)


@pytest.fixture
def small_rm(rng):
    return RewardModelParams.random(8, 2, rng, scale=0.5)
