import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "meterlink", deadline=None, max_examples=50, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("meterlink")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(n: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n:>2}: {detail}"
        request.config.stash.setdefault(ACCEPTANCE, []).append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
