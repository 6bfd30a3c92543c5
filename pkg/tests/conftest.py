"""Shared oracles and the acceptance-criteria summary hook."""

import numpy as np
import pytest

ACCEPTANCE_LINES = {}


def record_acceptance(number, passed, text):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {text}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])


def recursion_filter(num, den, x):
    """Direct difference equation ``sum a_i y[k-i] = sum b_i x[k-i]``, zero initial state."""
    x = np.asarray(x, dtype=float)
    y = np.zeros_like(x)
    for k in range(len(x)):
        acc = 0.0
        for i, b in enumerate(num):
            if k - i >= 0:
                acc += b * x[k - i]
        for i, a in enumerate(den[1:], start=1):
            if k - i >= 0:
                acc -= a * y[k - i]
        y[k] = acc / den[0]
    return y


def time_stepping_loop(g_num, g_den, c_num, c_den, r, f, v=None, w=None):
    """Sample-by-sample closed loop that solves the algebraic loop at each step.

    ``y_p = G (u - w)``, ``y = y_p + v``, ``e = r - y``, ``u = C e + f``.
    """
    n = len(r)
    v = np.zeros(n) if v is None else v
    w = np.zeros(n) if w is None else w
    e, u, c, yp = (np.zeros(n) for _ in range(4))
    g0 = g_num[0] / g_den[0]
    c0 = c_num[0] / c_den[0]

    def history(num, den, x, y, k):
        acc = sum(num[i] * x[k - i] for i in range(1, len(num)) if k - i >= 0)
        acc -= sum(den[i] * y[k - i] for i in range(1, len(den)) if k - i >= 0)
        return acc / den[0]

    ui = np.zeros(n)  # plant input u - w
    for k in range(n):
        hy = history(g_num, g_den, ui, yp, k)
        hc = history(c_num, c_den, e, c, k)
        e[k] = (r[k] - v[k] - hy - g0 * (hc + f[k] - w[k])) / (1.0 + g0 * c0)
        c[k] = c0 * e[k] + hc
        u[k] = c[k] + f[k]
        ui[k] = u[k] - w[k]
        yp[k] = g0 * ui[k] + hy
    return yp + v, e, u


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
