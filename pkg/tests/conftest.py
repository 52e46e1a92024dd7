import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=50, deadline=None)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def rel_err(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-300))


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """``with criterion("3", "limits"): ...`` records one PASS/FAIL line."""
    from contextlib import contextmanager

    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    @contextmanager
    def record(num, title):
        try:
            yield
        except BaseException as exc:
            first = (str(exc).strip().splitlines() or [type(exc).__name__])[0]
            line = f"criterion {num:<3} FAIL  {title}: {first[:120]}"
            lines.append(line)
            print(line)
            raise
        line = f"criterion {num:<3} PASS  {title}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
