import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from spikegait._backend import has_compiled
from spikegait.events import EventStream

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

BACKENDS = ["python"] + (["cython"] if has_compiled() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


def random_stream(rng, n=100, width=16, height=12, t_start=0, duration=10_000, margin=0):
    """Seeded uniform events; ``margin`` keeps timestamps that far from the window edges."""
    t = np.sort(rng.integers(t_start + margin, t_start + duration - margin + 1, n))
    x = rng.integers(0, width, n)
    y = rng.integers(0, height, n)
    p = rng.choice([-1, 1], n)
    return EventStream.unsorted(x, y, t, p, width, height, t_start, duration)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``acceptance(n, ok, detail)`` records one criterion line for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
