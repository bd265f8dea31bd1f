import copy
import dataclasses
import functools

import numpy as np
import pytest

from shellinv import config


@functools.lru_cache(maxsize=None)
def scenario(name, nel=None):
    """Built-in benchmark scenario, cached across tests (treat as read-only)."""
    return config.build(config.load_spec(name), nel)


@functools.lru_cache(maxsize=None)
def forward_solution(name):
    sc = scenario(name)
    return sc.forward.solve(sc.problem.loads)


def private_forward(inv, tol=1e-12):
    """Give ``inv`` its own forward model with a tighter Newton tolerance.

    Scenarios are cached, so their forward model must not be changed in place.
    """
    fw = copy.copy(inv.forward)
    fw.settings = dataclasses.replace(fw.settings, tol=tol)
    inv.forward = fw
    return inv


def smooth_displacement(problem, amplitude, seed=0):
    """Smooth random field: low-order trigonometric modes of the reference coordinates."""
    rng = np.random.default_rng(seed)
    X = problem.model.X
    span = np.ptp(X, axis=0)
    span[span == 0] = 1.0
    Y = (X - X.min(axis=0)) / span
    u = np.zeros_like(X)
    for i in range(3):
        k = rng.uniform(0.5, 2.0, 3)
        ph = rng.uniform(0, np.pi, 3)
        u[:, i] = np.sin(np.pi * k[0] * Y[:, 0] + ph[0]) * np.cos(np.pi * k[1] * Y[:, 1] + ph[1])
    U = np.zeros(problem.dofmap.n_total)
    planar = np.sort(np.ptp(X, axis=0))[-2]
    U[: problem.model.n_disp] = amplitude * planar * u.ravel()
    U[problem.model.n_disp:] = rng.normal(size=problem.dofmap.n_mult)
    return U


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number, part, passed, detail):
    """Store one checked part of an acceptance criterion for the terminal summary."""
    ACCEPTANCE.setdefault(number, []).append((part, bool(passed), detail))
    print(f"criterion {number} [{part}]: {'PASS' if passed else 'FAIL'} {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        parts = ACCEPTANCE[number]
        ok = all(p[1] for p in parts)
        detail = "; ".join(f"{name}: {'ok' if p else 'FAILED'} ({d})" for name, p, d in parts)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
