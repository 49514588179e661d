import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from abstain_verify.data import FIXTURE_MASK, lift, load_fixture
from abstain_verify.ibp import InputRegion, propagate
from abstain_verify.nn import Network, random_network
from abstain_verify.oracle import exact_check
from abstain_verify.simplex import initial_point
from abstain_verify.verify import (JContext, J_value, SimplexSettings, classical_ibp_margin, inner_max, minimize_J,
                                   objective_rows, verify_ibp, verify_ibp_batch)

from conftest import grid_min_J, tiny_net


def test_objective_rows():
    net = random_network([2, 3, 5], 3, 2, np.random.default_rng(0))
    rows = objective_rows(net, 0, 2)
    assert rows.tolist() == [[1, 0, -1, 0, 0], [0, 0, -1, 1, 0], [0, 0, -1, 0, 1]]
    with pytest.raises(ValueError):
        objective_rows(net, 0, 0)
    with pytest.raises(ValueError):
        objective_rows(net, 0, 3)


def test_inner_max_identity():
    value, z = inner_max(np.zeros(2), np.ones(2), np.eye(2), np.zeros(2), np.array([1.0, -1.0]))
    assert value == 1.0 and z.tolist() == [0.0, 1.0]


def test_inner_max_zero_objective():
    value, _ = inner_max(np.zeros(3), np.ones(3), np.ones((2, 3)), np.zeros(2), np.zeros(2))
    assert value == 0.0


def test_inner_max_matches_corners(rng):
    for _ in range(50):
        W = rng.normal(size=(4, 3))
        b = rng.normal(size=4)
        lo = rng.normal(size=3)
        hi = lo + rng.random(3)
        c = rng.normal(size=4)
        value, z = inner_max(lo, hi, W, b, c)
        corners = [np.where(bits, hi, lo) for bits in itertools.product([0, 1], repeat=3)]
        best = max(-(c @ (W @ p + b)) for p in corners)
        assert abs(value - best) <= 1e-12


def test_J_reduces_to_classical_margin_without_abstains(rng):
    net = random_network([3, 5, 3], 3, 0, rng)
    region = InputRegion(rng.normal(size=3), 0.3)
    ctx = JContext.build(net, propagate(net, region), 1, 2)
    value, grad = J_value(np.array([1.0]), ctx)
    assert np.isclose(-value, classical_ibp_margin(net, region, 1, 2), atol=1e-12)
    assert grad.shape == (1,)


def test_J_at_vertex_equals_single_row(rng):
    net = tiny_net(rng, hidden=(5,), K=3, M=2)
    b = propagate(net, InputRegion(rng.normal(size=2), 0.4))
    ctx = JContext.build(net, b, 0, 1)
    lo, hi = b.penultimate
    for m in range(3):
        e = np.zeros(3)
        e[m] = 1.0
        ref, _ = inner_max(lo, hi, net.layers[-1].weight, net.layers[-1].bias, ctx.rows[m])
        assert J_value(e, ctx)[0] == ref


def test_J_subgradient_finite_differences(rng):
    net = tiny_net(rng, hidden=(5,), K=3, M=2)
    ctx = JContext.build(net, propagate(net, InputRegion(rng.normal(size=2), 0.3)), 2, 0)
    eta = np.array([0.5, 0.3, 0.2])
    _, g = J_value(eta, ctx)
    h = 1e-7
    for m in range(3):
        e = np.zeros(3)
        e[m] = h
        fd = (J_value(eta + e, ctx)[0] - J_value(eta - e, ctx)[0]) / (2 * h)
        assert abs(fd - g[m]) <= 1e-5 * max(1.0, abs(g[m]))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_J_is_convex(seed):
    rng = np.random.default_rng(seed)
    net = random_network([2, 4, 5], 3, 2, rng)
    ctx = JContext.build(net, propagate(net, InputRegion(rng.normal(size=2), 0.5)), 0, 1)
    e1, e2 = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    mid = J_value((e1 + e2) / 2, ctx)[0]
    assert mid <= (J_value(e1, ctx)[0] + J_value(e2, ctx)[0]) / 2 + 1e-12


def test_zero_radius_correct_sample_verified(rng):
    net = tiny_net(rng, K=3, M=2)
    for x in rng.normal(size=(20, 2)):
        region = InputRegion(x, 0.0)
        logits = propagate(net, region).lower[-1]
        y = int(np.argmax(logits[:3]))
        cert = verify_ibp(net, region, y)
        expected = all(max(logits[y], *logits[3:]) > logits[k] for k in range(3) if k != y)
        assert cert.overall_verified == expected


def test_zero_radius_misclassified_not_verified():
    W = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    net = Network.from_arrays([W], [np.array([0.0, 0.0, -1.0])], num_classes=2, num_abstain=1)
    cert = verify_ibp(net, InputRegion(np.array([1.0, 0.0]), 0.0), 0)
    assert cert.predicted == 1 and not cert.overall_verified


def test_fixture_grid_verified_points_pass_oracle():
    net = load_fixture()
    rng = np.random.default_rng(3)
    grid = [(a, b) for a in np.linspace(-3, 3, 7) for b in np.linspace(-3, 3, 7)]
    certified = 0
    for x in grid:
        region = InputRegion(lift(x)[0], 1.0, mask=FIXTURE_MASK)
        for y in (0, 1):
            if verify_ibp(net, region, y).overall_verified:
                certified += 1
                assert exact_check(net, region, y, resolution=0.05, rng=rng)
    assert certified > 0


def test_certificate_record_format(rng):
    net = tiny_net(rng, K=3, M=1)
    cert = verify_ibp(net, InputRegion(np.zeros(2), 0.1), 1)
    rec = cert.to_record(7)
    assert list(rec) == ["index", "y", "predicted", "overall_verified", "per_target"]
    assert [t["k"] for t in rec["per_target"]] == [0, 2]
    assert all(set(t) == {"k", "bound", "verified"} for t in rec["per_target"])
    assert all(t["verified"] == (t["bound"] >= 0) for t in rec["per_target"])
    assert "eta" in cert.to_record(7, witnesses=True)["per_target"][0]


def test_monotone_in_eps(rng):
    for _ in range(20):
        net = tiny_net(rng, hidden=(6,), K=3, M=2)
        x = rng.normal(size=2)
        y = 0
        bounds = [verify_ibp(net, InputRegion(x, e), y).min_bound for e in (0.05, 0.1, 0.2, 0.4)]
        verified = [b >= 0 for b in bounds]
        assert verified == sorted(verified, reverse=True)


def test_dead_abstain_row_changes_nothing(rng):
    net = tiny_net(rng, hidden=(5,), K=3, M=1)
    W, b = net.layers[-1].weight, net.layers[-1].bias
    W2 = np.vstack([W, np.zeros((1, W.shape[1]))])
    b2 = np.append(b, -1e6)
    wider = Network.from_arrays([net.layers[0].weight, W2], [net.layers[0].bias, b2], 3, 2)
    s = SimplexSettings(nu=0.02, iters=2000, init="uniform", early_exit=False)
    for x in rng.normal(size=(10, 2)):
        region = InputRegion(x, 0.3)
        c1 = verify_ibp(net, region, 0, s)
        c2 = verify_ibp(wider, region, 0, s)
        for t1, t2 in zip(c1.targets, c2.targets):
            assert t2.bound <= t1.bound + 1e-9
            assert t2.bound >= t1.bound - 1e-3


def test_no_abstain_matches_classical(rng):
    for _ in range(20):
        net = random_network([3, 6, 6, 4], 4, 0, rng)
        region = InputRegion(rng.normal(size=3), 0.2)
        cert = verify_ibp(net, region, 2)
        for t in cert.targets:
            assert abs(t.bound - classical_ibp_margin(net, region, 2, t.k)) <= 1e-9


def test_batch_equals_single(rng):
    net = tiny_net(rng, hidden=(6, 5), K=3, M=2)
    X = rng.normal(size=(12, 2))
    y = rng.integers(0, 3, size=12)
    settings_ = SimplexSettings(nu=0.05, iters=100)
    batch = verify_ibp_batch(net, X, y, 0.2, settings_)
    for x, label, cb in zip(X, y, batch):
        cs = verify_ibp(net, InputRegion(x, 0.2), int(label), settings_)
        assert cs.overall_verified == cb.overall_verified and cs.predicted == cb.predicted
        assert np.allclose([t.bound for t in cs.targets], [t.bound for t in cb.targets], atol=1e-12)


def test_requires_two_classes():
    net = Network.from_arrays([np.eye(2)], num_classes=1, num_abstain=1)
    with pytest.raises(ValueError):
        verify_ibp(net, InputRegion(np.zeros(2), 0.1), 0)


def test_interior_start_lets_abstain_help():
    # abstain logit dominates target everywhere; only abstain mass certifies
    W = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    b = np.array([0.0, 0.0, 0.5])
    net = Network.from_arrays([W], [b], num_classes=2, num_abstain=1)
    region = InputRegion(np.array([1.0, 0.0]), 0.5)
    vertex = verify_ibp(net, region, 0, SimplexSettings(init="vertex", nu=0.1))
    interior = verify_ibp(net, region, 0, SimplexSettings(init="interior", nu=0.1))
    assert not vertex.overall_verified
    assert interior.overall_verified
    assert initial_point(2, "interior")[1] > 0


def test_solver_reaches_grid_oracle_with_longer_budget(rng):
    s = SimplexSettings(nu=0.05, iters=5000, init="uniform", early_exit=False)
    for i in range(30):
        M = 1 + i % 2
        net = random_network([2, 6, 3 + M], 3, M, rng)
        region = InputRegion(rng.normal(size=2), float(rng.uniform(0.05, 0.5)))
        ctx = JContext.build(net, propagate(net, region), 0, int(rng.integers(1, 3)))
        assert minimize_J(ctx, s)[1] - grid_min_J(ctx, M) <= 1e-3
