import itertools

import numpy as np
import pytest

from mildhjb.dynamics import Box
from mildhjb.hjb import (
    ConvexControlCost,
    CostSpec,
    GridSpec,
    QuadraticControlCost,
    ValueField,
    contraction_constant,
    control_argmin,
    control_lipschitz_constant,
    feedback_map,
    hamiltonian_F0,
    hamiltonian_FCV,
    hat_weights,
    solve_mild_hjb,
    strict_form_residual,
)
from mildhjb.model import build_model


def identity_model(m=1, n=None):
    n = m if n is None else n
    return build_model(np.arange(n, dtype=float), np.ones(n), np.ones(n), np.eye(n, m), beta=0.0, lam=1.0)


def constant_cost(c):
    return lambda x: np.full(np.shape(x)[:-1], c)


def brute_force_F0(cost, model, x, q, grid):
    vals = [hamiltonian_FCV(cost, model, x, q, np.array(u)) for u in grid]
    return min(vals)


# --- Hamiltonians -----------------------------------------------------------

def test_F0_at_zero_gradient():
    m = identity_model(2)
    cost = CostSpec(constant_cost(0.7), QuadraticControlCost(1.0), Box.symmetric(2, 1.0))
    assert hamiltonian_F0(cost, m, np.zeros(2), np.zeros(2)) == pytest.approx(0.7)


def test_F0_quadratic_unbounded():
    m = identity_model(2)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(1.0))
    q = np.array([0.6, -1.3])
    assert hamiltonian_F0(cost, m, np.zeros(2), q) == pytest.approx(-0.5 * q @ q)
    grid = itertools.product(np.linspace(-2, 2, 401), repeat=2)
    assert brute_force_F0(cost, m, np.zeros(2), q, grid) == pytest.approx(-0.5 * q @ q, abs=1e-4)


@pytest.mark.parametrize("q", [-2.0, -0.3, 0.0, 0.4, 3.0])
def test_F0_box_linear(q):
    m = identity_model(1)
    cost = CostSpec(constant_cost(0.2), QuadraticControlCost(0.0), Box.symmetric(1, 1.0))
    assert hamiltonian_F0(cost, m, np.zeros(1), np.array([q])) == pytest.approx(0.2 - abs(q))
    grid = [[u] for u in np.linspace(-1, 1, 201)]
    assert brute_force_F0(cost, m, np.zeros(1), np.array([q]), grid) == pytest.approx(0.2 - abs(q))


def test_F0_never_exceeds_FCV():
    rng = np.random.default_rng(0)
    m = identity_model(2, 3)
    box = Box.symmetric(2, 0.8)
    cost = CostSpec(lambda x: np.sin(x[..., 0]) ** 2, QuadraticControlCost(1.0), box)
    x = rng.normal(size=(10_000, 3))
    q = rng.normal(size=(10_000, 3)) * 2
    u = box.sample(rng, 10_000)
    assert np.all(hamiltonian_F0(cost, m, x, q) <= hamiltonian_FCV(cost, m, x, q, u) + 1e-12)


def test_FCV_at_argmin_equals_F0():
    m = identity_model(2)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(2.0), Box.symmetric(2, 0.5))
    q = np.array([0.3, -4.0])
    u = control_argmin(cost, m, q)
    assert hamiltonian_FCV(cost, m, np.zeros(2), q, u) == pytest.approx(hamiltonian_F0(cost, m, np.zeros(2), q))


def test_FCV_without_control_map():
    m = build_model([0.0, 1.0], [1, 1], [1, 1], np.zeros((2, 1)), beta=0.0)
    cost = CostSpec(lambda x: x[..., 0] ** 2, QuadraticControlCost(1.0), Box.symmetric(1, 1.0))
    x, u = np.array([0.5, 0.0]), np.array([0.3])
    for q in (np.zeros(2), np.array([5.0, -2.0])):
        assert hamiltonian_FCV(cost, m, x, q, u) == pytest.approx(0.25 + 0.045)


def test_FCV_rejects_control_outside_box():
    m = identity_model(1)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(1.0), Box.symmetric(1, 1.0))
    with pytest.raises(ValueError, match="admissible"):
        hamiltonian_FCV(cost, m, np.zeros(1), np.zeros(1), np.array([1.5]))


def test_noncoercive_unbounded_rejected():
    m = identity_model(1)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(0.0))
    with pytest.raises(ValueError, match="-inf"):
        hamiltonian_F0(cost, m, np.zeros(1), np.ones(1))
    with pytest.raises(ValueError, match="-inf"):
        CostSpec(constant_cost(0.0), QuadraticControlCost(0.0), Box.full(1))


def test_F0_concave_in_gradient():
    rng = np.random.default_rng(1)
    m = identity_model(2, 3)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(1.0), Box.symmetric(2, 0.5))
    x = np.zeros(3)
    for _ in range(500):
        q1, q2 = rng.normal(size=(2, 3)) * 3
        mid = hamiltonian_F0(cost, m, x, 0.5 * (q1 + q2))
        assert mid >= 0.5 * (hamiltonian_F0(cost, m, x, q1) + hamiltonian_F0(cost, m, x, q2)) - 1e-12


def test_F0_lipschitz_constant():
    rng = np.random.default_rng(2)
    m = build_model([0.0, 1.0, 4.0], [1, 1, 1], [1, 1, 1], rng.normal(size=(3, 2)), beta=0.0)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(1.0), Box.symmetric(2, 0.7))
    c = control_lipschitz_constant(cost, m)
    corners = [np.array(u) for u in itertools.product([-0.7, 0.7], repeat=2)]
    assert c == pytest.approx(max(np.linalg.norm(m.control_map @ u) for u in corners))
    for _ in range(500):
        q1, q2 = rng.normal(size=(2, 3)) * 2
        gap = abs(hamiltonian_F0(cost, m, np.zeros(3), q1) - hamiltonian_F0(cost, m, np.zeros(3), q2))
        assert gap <= c * np.linalg.norm(q1 - q2) + 1e-12


def test_argmin_ignores_state_cost_shift():
    m = identity_model(2)
    q = np.array([[0.4, -0.9], [2.0, 0.1]])
    a = CostSpec(lambda x: np.cos(x[..., 0]), QuadraticControlCost(1.0), Box.symmetric(2, 1.0))
    b = CostSpec(lambda x: np.cos(x[..., 0]) + 5.0, QuadraticControlCost(1.0), Box.symmetric(2, 1.0))
    np.testing.assert_array_equal(control_argmin(a, m, q), control_argmin(b, m, q))


# --- argmin selections ------------------------------------------------------

@pytest.mark.parametrize("q, box, expect", [
    (0.0, None, 0.0),
    (0.8, None, -0.8),
    (-2.5, None, 2.5),
    (3.0, Box.symmetric(1, 1.0), -1.0),
])
def test_argmin_examples(q, box, expect):
    m = identity_model(1)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(1.0), box)
    assert control_argmin(cost, m, np.array([q]))[0] == pytest.approx(expect)


def test_argmin_brute_force_convex_cost():
    m = identity_model(2)
    l2 = ConvexControlCost(lambda u: np.sum(u**4) + 0.5 * np.sum(u**2))
    cost = CostSpec(constant_cost(0.0), l2, Box.symmetric(2, 1.0))
    q = np.array([0.9, -0.2])
    u = control_argmin(cost, m, q)
    grid = np.array(list(itertools.product(np.linspace(-1, 1, 401), repeat=2)))
    vals = grid @ q + np.sum(grid**4, axis=1) + 0.5 * np.sum(grid**2, axis=1)
    np.testing.assert_allclose(u, grid[np.argmin(vals)], atol=6e-3)


def test_argmin_ties_go_to_lower_corner():
    m = identity_model(2)
    box = Box(np.array([-1.0, 0.0]), np.array([1.0, 2.0]))
    for l2 in (QuadraticControlCost(0.0), ConvexControlCost(lambda u: 0.0)):
        u = control_argmin(CostSpec(constant_cost(0.0), l2, box), m, np.zeros(2))
        np.testing.assert_allclose(u, [-1.0, 0.0], atol=1e-8)


def test_feedback_map_reads_field_gradient():
    m = identity_model(2)
    axes = [np.linspace(-1, 1, 5)] * 2
    grad = np.zeros((5, 5, 2))
    grad[..., 0] = 0.3
    grad[..., 1] = -3.0
    v = ValueField((0, 1), axes, np.zeros((5, 5)), grad, 2)
    cost = CostSpec(constant_cost(0.0), QuadraticControlCost(1.0), Box.symmetric(2, 1.0))
    np.testing.assert_allclose(feedback_map(cost, m, v, np.array([0.2, 0.1])), [-0.3, 1.0])


# --- interpolation weights --------------------------------------------------

def test_hat_weights_partition_and_reproduce_means():
    axis = np.linspace(-3, 3, 31)
    mean = np.array([-1.0, 0.0, 0.37, 1.2])
    W, dW = hat_weights(axis, mean, 0.3)
    np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-13)
    np.testing.assert_allclose(W @ axis, mean, atol=1e-12)
    np.testing.assert_allclose(dW @ axis, 1.0, atol=1e-10)
    rng = np.random.default_rng(0)
    f = rng.normal(size=axis.size)
    z = rng.standard_normal(400_000)
    mc = np.interp(mean[2] + 0.3 * z, axis, f).mean()
    assert (W @ f)[2] == pytest.approx(mc, abs=5e-3)


# --- solver -----------------------------------------------------------------

def test_constant_cost_solution():
    m = build_model([0.0, 1.0, 4.0], [1, 1, 1], [1, 1, 1], np.ones((3, 1)), beta=0.0, lam=2.0)
    cost = CostSpec(constant_cost(0.6), QuadraticControlCost(0.0), Box(np.zeros(1), np.zeros(1)),
                    l1_bounds=(0.6, 0.6), support=())
    assert contraction_constant(m, cost, (0, 1)) == 0.0
    v = solve_mild_hjb(m, cost, GridSpec(n_nodes=9))
    np.testing.assert_allclose(v.values, 0.3, rtol=1e-8)
    assert np.max(np.abs(v.gradient)) < 1e-12
    assert v.iterations == 1
    x = v.embed(np.array([0.1, -0.2]))
    assert abs(strict_form_residual(m, cost, v, x)) < 1e-6


def test_solver_rejects_small_discount(neumann):
    slow = neumann.model.with_discount(0.05)
    with pytest.raises(ValueError, match="threshold"):
        solve_mild_hjb(slow, neumann.cost, GridSpec(n_nodes=9))


def test_solver_iteration_cap(neumann):
    with pytest.raises(RuntimeError):
        solve_mild_hjb(neumann.model, neumann.cost, GridSpec(n_nodes=9), tol=1e-12, max_iter=2)


def test_solver_rejects_cost_outside_grid(neumann):
    with pytest.raises(ValueError, match="outside"):
        solve_mild_hjb(neumann.model, neumann.cost, GridSpec(modes=(0,), n_nodes=9))


def test_contraction_ratio_within_constant(solved):
    assert solved.contraction_constant < 1
    assert solved.measured_ratio <= solved.contraction_constant + 0.05


def test_value_bounds(solved, neumann):
    lam = solved.lam
    lo = neumann.cost.lower_bound(2) / lam
    # constant control u = 0: running cost at most sup l1
    hi = neumann.cost.l1_bounds[1] / lam
    assert lo - 1e-9 <= solved.values.min() and solved.values.max() <= hi + 1e-9


def test_mild_evaluation_matches_nodes(solved):
    nodes = solved.embed(solved.nodes()[::97])
    exact, grads = solved.mild(nodes)
    np.testing.assert_allclose(exact, solved.values.ravel()[::97], atol=5 * solved.residual + 1e-12)
    np.testing.assert_allclose(grads, solved.gradient.reshape(-1, 8)[::97], atol=1e-6)


def test_strict_form_residual_small(solved, neumann):
    rng = np.random.default_rng(7)
    idx = rng.integers(10, 31, size=(20, 2))
    for i, j in idx:
        x = solved.embed(np.array([solved.axes[0][i], solved.axes[1][j]]))
        assert abs(strict_form_residual(neumann.model, neumann.cost, solved, x)) <= 0.05 * solved.sup_norm


def test_strict_form_residual_detects_perturbation(solved, neumann):
    rng = np.random.default_rng(3)
    noisy = ValueField(solved.modes, solved.axes, solved.values + 0.1 * solved.sup_norm * rng.normal(size=solved.shape),
                       solved.gradient, solved.n_state, lam=solved.lam)
    for i, j in [(15, 20), (20, 20), (25, 18)]:
        x = solved.embed(np.array([solved.axes[0][i], solved.axes[1][j]]))
        base = abs(strict_form_residual(neumann.model, neumann.cost, solved, x))
        bad = abs(strict_form_residual(neumann.model, neumann.cost, noisy, x))
        assert bad >= 10 * base


def test_strict_form_needs_interior_point(solved, neumann):
    x = solved.embed(solved.upper)
    with pytest.raises(ValueError):
        strict_form_residual(neumann.model, neumann.cost, solved, x)
