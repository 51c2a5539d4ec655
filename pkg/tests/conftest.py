import numpy as np
import pytest

from sparselab.scene_io import default_spec, select_track, synthesize_scene


@pytest.fixture(scope="session")
def scene():
    return synthesize_scene(default_spec(), seed=0)


@pytest.fixture(scope="session")
def scene3(scene):
    return select_track(scene, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance verdicts ---------------------------------------------------------------
# Each acceptance test records one line; the terminal summary prints them in order.

VERDICTS: dict[int, tuple[bool, str]] = {}


class _Verdict:
    def __init__(self, n: int):
        self.n = n

    def __call__(self, ok: bool, detail: str) -> bool:
        VERDICTS[self.n] = (bool(ok), detail)
        return ok


@pytest.fixture
def verdict(request):
    n = request.node.get_closest_marker("criterion").args[0]
    yield _Verdict(n)
    if n not in VERDICTS:
        VERDICTS[n] = (False, "did not complete (error before the check)")


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(VERDICTS):
        ok, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
