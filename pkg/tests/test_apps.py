import numpy as np
import pytest
from scipy.integrate import quad, solve_bvp

from mildhjb.apps import (
    build_delay_instance,
    build_neumann_instance,
    cosine_basis_1d,
    delayed_mean_reference,
    delayed_sde_euler,
    neumann_closed_form_1d,
    neumann_map_1d,
    square_boundary_basis,
    square_modes,
)
from mildhjb.dynamics import ControlProcess, controlled_mean


def bvp_solution(delta, alpha):
    """Numerical solve of w'' = delta w with -w'(0) = alpha_0, w'(pi) = alpha_pi."""
    xs = np.linspace(0, np.pi, 201)
    sol = solve_bvp(lambda x, y: np.vstack([y[1], delta * y[0]]),
                    lambda ya, yb: np.array([-ya[1] - alpha[0], yb[1] - alpha[1]]),
                    xs, np.zeros((2, xs.size)), tol=1e-10, max_nodes=100_000)
    assert sol.success
    return sol.sol


def project(w, k):
    return quad(lambda x: w(x) * cosine_basis_1d(k, x), 0, np.pi, epsabs=1e-14, epsrel=1e-13, limit=200)[0]


# --- Neumann map ------------------------------------------------------------

def test_zero_boundary_data():
    assert np.all(neumann_map_1d(1.0, [0.0, 0.0], 12) == 0.0)


@pytest.mark.parametrize("delta, alpha", [(1.0, (1.0, 0.0)), (2.5, (0.3, -1.2)), (0.2, (0.0, 1.0))])
def test_neumann_map_against_closed_form_projection(delta, alpha):
    coeffs = neumann_map_1d(delta, alpha, 10)
    w = lambda x: neumann_closed_form_1d(delta, alpha, x)
    proj = np.array([project(w, k) for k in range(10)])
    np.testing.assert_allclose(coeffs, proj, rtol=1e-8, atol=1e-13)


@pytest.mark.parametrize("delta, alpha", [(1.0, (1.0, 0.0)), (2.5, (0.3, -1.2))])
def test_closed_form_solves_boundary_value_problem(delta, alpha):
    sol = bvp_solution(delta, alpha)
    xs = np.linspace(0, np.pi, 41)
    np.testing.assert_allclose(neumann_closed_form_1d(delta, alpha, xs), sol(xs)[0], rtol=1e-6, atol=1e-8)


def test_green_identity():
    delta, alpha = 1.3, np.array([0.7, -0.4])
    w = lambda x: neumann_closed_form_1d(delta, alpha, x)
    for k in range(17):
        boundary = alpha[0] * cosine_basis_1d(k, 0.0) + alpha[1] * cosine_basis_1d(k, np.pi)
        assert abs((delta + k * k) * project(w, k) - boundary) < 1e-10


def test_neumann_map_rejects_nonpositive_delta():
    with pytest.raises(ValueError):
        neumann_map_1d(0.0, [1.0, 0.0], 4)


@pytest.mark.parametrize("delta, eps", [(0.5, 0.01), (1.0, 0.05), (3.0, 0.3), (10.0, 0.7)])
def test_boundary_input_invariant(delta, eps):
    inst = build_neumann_instance(N=10, delta=delta, epsilon=eps, override=True)
    alpha = np.array([0.8, -0.3])
    k = np.arange(10)
    expect = alpha[0] * cosine_basis_1d(k, 0.0) + alpha[1] * cosine_basis_1d(k, np.pi)
    np.testing.assert_allclose(inst.boundary_input(alpha), expect, rtol=1e-14, atol=1e-15)


# --- Neumann instances ------------------------------------------------------

def test_d1_instance_passes(neumann):
    assert neumann.audits_pass
    assert {r.condition_id for r in neumann.reports} == {"H1", "H2", "esg", "commutation"}
    assert neumann.model.beta == pytest.approx(0.3)
    assert neumann.model.p > 1 / (0.75 - 0.05)


def test_d2_instance_passes():
    inst = build_neumann_instance(d=2, N=24, theta=0.1, epsilon=0.01)
    assert inst.audits_pass and inst.n_controls == 4


def test_d2_without_noise_decay_rejected():
    with pytest.raises(ValueError, match="H1"):
        build_neumann_instance(d=2, N=24, theta=0.0, epsilon=0.01)


def test_d3_refused():
    with pytest.raises(ValueError, match="empty"):
        build_neumann_instance(d=3)


@pytest.mark.parametrize("kwargs", [dict(epsilon=0.0), dict(epsilon=0.8), dict(delta=0.0), dict(p=1.0)])
def test_instance_parameter_errors(kwargs):
    with pytest.raises(ValueError):
        build_neumann_instance(**kwargs)


def test_override_logs(caplog):
    inst = build_neumann_instance(d=2, N=24, theta=0.0, epsilon=0.01, override=True)
    assert not inst.audits_pass
    assert any("override" in r.message for r in caplog.records)


def test_square_modes_sorted():
    ij, mu = square_modes(12)
    assert np.all(np.diff(mu) >= 0) and mu[0] == 0
    np.testing.assert_array_equal(mu, ij[:, 0] ** 2 + ij[:, 1] ** 2)


def test_square_boundary_basis_matches_quadrature():
    ij, _ = square_modes(6)
    table = square_boundary_basis(ij, 4)
    c = lambda n: 1 / np.sqrt(np.pi) if n == 0 else np.sqrt(2 / np.pi)
    e = lambda i, j, x, y: c(i) * c(j) * np.cos(i * x) * np.cos(j * y)
    # lowest boundary functions are the normalised constants on each edge
    edges = [lambda s, i, j: e(i, j, s, 0.0), lambda s, i, j: e(i, j, s, np.pi),
             lambda s, i, j: e(i, j, 0.0, s), lambda s, i, j: e(i, j, np.pi, s)]
    for col, edge in enumerate(edges):
        for row, (i, j) in enumerate(ij):
            val = quad(lambda s: edge(s, i, j), 0, np.pi)[0] / np.sqrt(np.pi)
            assert table[row, col] == pytest.approx(val, abs=1e-12)


# --- delay example ----------------------------------------------------------

def test_delay_without_kernel_is_scalar_ou():
    inst = build_delay_instance(-0.5, 2.0, 0.3, 1.0, np.zeros(32), 32, y0=0.4)
    u = ControlProcess.constant([1.0])
    t = 1.5
    mean = controlled_mean(inst.model, inst.x0, inst.abstract_process(u), t)[0]
    expect = 0.4 * np.exp(-0.5 * t) + 2.0 * (1 - np.exp(-0.5 * t)) / 0.5
    assert mean == pytest.approx(expect, rel=1e-10)


def test_zero_past_control_gives_empty_history():
    inst = build_delay_instance(-1.0, 1.0, 0.5, 1.0, np.exp, 16, u0=lambda s: 0.0)
    assert np.all(inst.x0[1:] == 0.0)


def test_history_from_past_control():
    inst = build_delay_instance(-1.0, 1.0, 0.5, 1.0, np.exp, 16, u0=lambda s: 1.0)
    expect = np.exp(inst.grid) - np.exp(-1.0)
    np.testing.assert_allclose(inst.x0[1:], expect, rtol=1e-10)


def test_delay_direction_normalised():
    inst = build_delay_instance(-1.0, 1.0, 0.5, 1.0, np.exp, 16)
    b = inst.model.control_matrix[:, 0]
    assert inst.inner(b, b) == pytest.approx(1.0)


def test_shift_conserves_mass():
    inst = build_delay_instance(0.0, 1.0, 0.5, 1.0, np.exp, 16)
    weights = np.r_[1.0, np.full(16, inst.h)]
    np.testing.assert_allclose(weights @ inst.model.drift_matrix, 0.0, atol=1e-12)


@pytest.mark.parametrize("kwargs", [dict(sigma0=0.0), dict(n_d=1), dict(d_lag=0.0)])
def test_delay_parameter_errors(kwargs):
    base = dict(a0=-1.0, b0=1.0, sigma0=0.5, d_lag=1.0, b1_samples=np.exp, n_d=8)
    base.update(kwargs)
    with pytest.raises(ValueError):
        build_delay_instance(**base)


def test_euler_reference_agrees_with_ode_reference():
    u = ControlProcess.simple([0.0, 0.25, 0.6], [[1.0], [-0.5], [0.8]])
    times, euler = delayed_sde_euler(-1.0, 1.0, 0.5, 1.0, np.exp, u, 1.0, 1e-3)
    ref = delayed_mean_reference(-1.0, 1.0, 1.0, np.exp, u, times[::50])
    np.testing.assert_allclose(euler[::50], ref, atol=2e-4)
