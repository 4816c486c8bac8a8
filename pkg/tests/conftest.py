import numpy as np
import pytest

from pcl.encoder import NetSpec, init_params


@pytest.fixture
def tiny_spec():
    # 3*6+6 + 6*4+4 = 52 parameters
    return NetSpec(3, (6,), 4)


@pytest.fixture
def tiny_params(tiny_spec):
    return init_params(tiny_spec, seed=11)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def central_difference(f, tensors, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. each array in ``tensors`` (mutated in place)."""
    out = []
    for t in tensors:
        g = np.zeros_like(t)
        it = np.nditer(t, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = t[idx]
            t[idx] = old + h
            up = f()
            t[idx] = old - h
            down = f()
            t[idx] = old
            g[idx] = (up - down) / (2 * h)
        out.append(g)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / scale)


# one (criterion, passed, detail) entry per acceptance check, printed after the run
ACCEPTANCE_LINES = []


def record_criterion(number, title, passed, detail):
    ACCEPTANCE_LINES.append((number, title, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
