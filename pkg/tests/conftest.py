import numpy as np
import pytest


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences, entry by entry."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

_CRITERIA: dict[int, str] = {}


class Criterion:
    """Times one acceptance criterion and records a single PASS/FAIL line."""

    def __init__(self, number: int, title: str, limit_s: float | None = None):
        self.number, self.title, self.limit_s = number, title, limit_s
        self.ok, self.detail = None, ""

    def __enter__(self):
        import time

        self._t0 = time.perf_counter()
        return self

    def check(self, ok: bool, detail: str = ""):
        self.ok, self.detail = bool(ok), detail

    def __exit__(self, exc_type, exc, tb):
        import time

        elapsed = time.perf_counter() - self._t0
        self.elapsed = elapsed
        if exc_type is not None:
            self.ok, self.detail = False, f"error: {exc_type.__name__}: {exc}"
        elif self.ok is None:
            self.ok, self.detail = False, "no result recorded"
        timing = f"{elapsed:.1f}s"
        if self.limit_s is not None:
            timing += f" (limit {self.limit_s:g}s)"
            if elapsed >= self.limit_s and exc_type is None:
                self.ok = False
                self.detail += " runtime over limit"
        line = f"criterion {self.number:>2} {'PASS' if self.ok else 'FAIL'}  {self.title}: {self.detail} [{timing}]"
        _CRITERIA[self.number] = line
        print(line)
        return False


@pytest.fixture
def criterion():
    return Criterion


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])
