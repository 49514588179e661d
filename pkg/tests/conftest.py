import numpy as np
import pytest

from abstain_verify.nn import random_network


def tiny_net(rng, input_dim=2, hidden=(4,), K=3, M=2, scale=1.0):
    return random_network([input_dim, *hidden, K + M], K, M, rng, scale)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def J_on_points(E, ctx):
    """Vectorized J over many simplex points (independent of the solver code path)."""
    C = E @ ctx.rows
    V = C @ ctx.weight
    return -(C @ ctx.bias) + np.maximum(-V * ctx.lower, -V * ctx.upper).sum(axis=1)


def grid_min_J(ctx, M):
    """Minimum of J over the simplex at resolution 1e-5 (M=2: coarse grid, then a fine window)."""
    if M == 1:
        t = np.arange(0.0, 1.0 + 5e-6, 1e-5)
        return float(J_on_points(np.stack([1 - t, t], axis=1), ctx).min())
    coarse = np.arange(0.0, 1.0 + 5e-4, 1e-3)
    a, b = np.meshgrid(coarse, coarse, indexing="ij")
    keep = a + b <= 1.0 + 1e-12
    E = np.stack([a[keep], b[keep], np.clip(1 - a[keep] - b[keep], 0, None)], axis=1)
    vals = J_on_points(E, ctx)
    e1, e2 = E[int(np.argmin(vals)), 1:]
    fine_a = np.arange(max(e1 - 2e-3, 0.0), min(e1 + 2e-3, 1.0) + 5e-6, 1e-5)
    fine_b = np.arange(max(e2 - 2e-3, 0.0), min(e2 + 2e-3, 1.0) + 5e-6, 1e-5)
    a, b = np.meshgrid(fine_a, fine_b, indexing="ij")
    keep = a + b <= 1.0 + 1e-12
    F = np.stack([1 - a[keep] - b[keep], a[keep], b[keep]], axis=1)
    F[:, 0] = np.clip(F[:, 0], 0, None)
    return float(min(vals.min(), J_on_points(F, ctx).min()))


_ACCEPTANCE_LINES = []


@pytest.fixture
def report():
    """Record one PASS/FAIL line per criterion; known gaps turn into xfail instead of failing the suite."""

    def _report(number, ok, detail, known_gap=None):
        _ACCEPTANCE_LINES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        if not ok and known_gap:
            pytest.xfail(known_gap)
        assert ok, detail

    return _report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
