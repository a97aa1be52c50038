import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=50, deadline=None)
settings.load_profile("ci")


def numeric_grad(f, x, h=1e-4):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        status = "PASS" if exc_type is None else "FAIL"
        line = f"criterion {self.number} [{status}] {self.title}"
        if self.detail:
            line += f": {self.detail}"
        _CRITERIA.append(line)
        print(line)
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line for the acceptance summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
