import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def rel_error(a, b) -> float:
    """max |a - b| / max(|a|, |b|, 1e-8) over all entries, a scale-aware relative error."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def central_diff(f, x: torch.Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at flat float64 vector ``x``."""
    x = x.detach().clone()

    def value(v):
        with torch.no_grad():
            return float(f(v))

    g = np.empty(x.numel())
    for i in range(x.numel()):
        old = float(x[i])
        x[i] = old + h
        fp = value(x)
        x[i] = old - h
        fm = value(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, detail = results[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
