"""The two shipped applications: Neumann boundary control of a heat equation and a control delay.

Neumann example
    Heat equation on ``(0, pi)`` or ``(0, pi)^2`` with Neumann boundary control, written in the
    cosine eigenbasis.  The boundary input is lifted by the Neumann map and split between the
    unbounded factor ``G = (delta - A)^{1/4+eps}`` and the bounded factor ``L``.

Delay example
    Scalar SDE whose drift contains a distributed delay in the control.  The control history is
    carried by a transport equation on ``[-d, 0]``, discretised by an upwind shift.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.integrate import quad, solve_ivp

from .dynamics import Box, ControlProcess
from .dynamics import kernel_bound_audit
from .hjb import CostSpec, QuadraticControlCost, SaturatingRidgeCost
from .model import (ConditionReport, LinearModel, SpectralModel, build_model, check_commutation,
                    check_noise_trace, check_smoothing, theta_window)
from .rng import stream

__all__ = [
    "cosine_basis_1d",
    "neumann_map_1d",
    "neumann_closed_form_1d",
    "square_modes",
    "square_boundary_basis",
    "NeumannInstance",
    "build_neumann_instance",
    "DelayInstance",
    "build_delay_instance",
    "delayed_sde_euler",
    "delayed_mean_reference",
    "DEFAULT_TRACE_GAMMA",
]

log = logging.getLogger(__name__)

# exponent used for the noise-trace audit; the condition is easiest for small values
DEFAULT_TRACE_GAMMA = 0.01


# --------------------------------------------------------------------------
# Neumann boundary control
# --------------------------------------------------------------------------

def cosine_basis_1d(k, xi):
    """Orthonormal Neumann eigenfunctions on ``(0, pi)``: ``1/sqrt(pi)`` and ``sqrt(2/pi) cos(k xi)``."""
    k = np.asarray(k)
    xi = np.asarray(xi, dtype=float)
    norm = np.where(k == 0, 1.0 / np.sqrt(np.pi), np.sqrt(2.0 / np.pi))
    return norm * np.cos(k * xi)


def neumann_map_1d(delta: float, alpha, n_modes: int) -> np.ndarray:
    """Cosine coefficients of the solution of ``w'' = delta w`` with outward normal derivative ``alpha``.

    ``alpha = (alpha_0, alpha_pi)`` are the boundary values at ``0`` and ``pi``.
    """
    if not delta > 0:
        raise ValueError("the Neumann map needs delta > 0")
    alpha = np.asarray(alpha, dtype=float)
    k = np.arange(n_modes)
    boundary = alpha[..., :1] * cosine_basis_1d(k, 0.0) + alpha[..., 1:2] * cosine_basis_1d(k, np.pi)
    return boundary / (delta + k.astype(float) ** 2)


def neumann_closed_form_1d(delta: float, alpha, xi):
    """Closed-form solution of the one-dimensional Neumann problem at points ``xi``."""
    r = np.sqrt(delta)
    a0, api = alpha
    return (api * np.cosh(r * np.asarray(xi)) + a0 * np.cosh(r * (np.pi - np.asarray(xi)))) / (r * np.sinh(r * np.pi))


def square_modes(n_modes: int):
    """The ``n_modes`` lowest Neumann eigenpairs on the square, as index pairs and eigenvalues."""
    side = int(np.ceil(np.sqrt(n_modes))) + 2
    pairs = sorted(((i * i + j * j, i, j) for i in range(side * 2) for j in range(side * 2)))[:n_modes]
    ij = np.array([(i, j) for _, i, j in pairs])
    return ij, np.array([float(e) for e, _, _ in pairs])


def square_boundary_basis(ij: np.ndarray, m: int) -> np.ndarray:
    """Boundary integrals ``int_{boundary} b_l e_k`` for the ``m`` lowest edge-cosine boundary functions.

    Boundary functions are ordered by frequency; each frequency contributes one normalised cosine
    per edge (bottom, top, left, right).  Returns an ``(n_modes, m)`` table.
    """
    c = lambda n: np.where(n == 0, 1.0 / np.sqrt(np.pi), np.sqrt(2.0 / np.pi))
    i, j = ij[:, 0], ij[:, 1]
    cols = []
    freq = 0
    while len(cols) < m:
        l = freq
        cols.append(c(j) * (i == l))                       # bottom edge, eta = 0
        cols.append(c(j) * (-1.0) ** j * (i == l))         # top edge, eta = pi
        cols.append(c(i) * (j == l))                       # left edge, xi = 0
        cols.append(c(i) * (-1.0) ** i * (j == l))         # right edge, xi = pi
        freq += 1
    return np.stack(cols[:m], axis=1).astype(float)


@dataclass(eq=False)
class NeumannInstance:
    """Neumann boundary-control example with its spectral model, cost and audit reports."""

    spatial_dim: int
    delta: float
    epsilon: float
    theta: float
    n_controls: int
    model: SpectralModel
    cost: CostSpec
    reports: list = field(default_factory=list)
    boundary_table: Optional[np.ndarray] = None

    @property
    def audits_pass(self) -> bool:
        return all(r.satisfied for r in self.reports)

    def boundary_input(self, alpha) -> np.ndarray:
        """Coefficients of ``G L alpha``: the distributional boundary input."""
        return self.model.g_diag * self.model.control_drift(alpha)


def _default_cost(n_modes: int, box_radius: float, m: int, weight=(1.0, 1.0)) -> CostSpec:
    w = np.zeros(n_modes)
    w[: len(weight)] = weight
    return CostSpec(SaturatingRidgeCost(tuple(w)), QuadraticControlCost(1.0), Box.symmetric(m, box_radius))


def build_neumann_instance(d: int = 1, N: int = 8, delta: float = 1.0, epsilon: float = 0.05,
                           theta: float = 0.0, cost: Optional[CostSpec] = None, lam: float = 4.0,
                           p: Optional[float] = None, m: Optional[int] = None, box_radius: float = 0.5,
                           override: bool = False, gamma: float = DEFAULT_TRACE_GAMMA) -> NeumannInstance:
    """Assemble the Neumann example as a spectral model and run every assumption audit.

    ``override=True`` turns audit failures and an out-of-window ``theta`` into logged warnings.
    Dimension three and above is always refused: the admissible noise window is empty there.
    """
    window = theta_window(d)
    if window.empty:
        raise ValueError(f"no admissible noise exponent in dimension {d}: theta window {window} is empty")
    if d not in (1, 2):
        raise ValueError("the Neumann example is implemented for d = 1 and d = 2")
    if not 0.0 < epsilon < 0.75:
        raise ValueError("epsilon must lie in (0, 3/4)")
    if not delta > 0:
        raise ValueError("delta must be positive")
    problems = []
    if theta not in window:
        problems.append(f"theta={theta} outside the admissible window {window}")
    if not 1.5 + 2 * epsilon + d * theta < 2:
        problems.append(f"1.5 + 2 eps + d theta = {1.5 + 2 * epsilon + d * theta:.4g} is not below 2")
    beta = 0.25 + epsilon
    p = 2.0 / (0.75 - epsilon) if p is None else float(p)
    if not p > 1.0 / (0.75 - epsilon):
        raise ValueError(f"p must exceed 1/(3/4 - eps) = {1.0 / (0.75 - epsilon):.4g}")
    if d == 1:
        k = np.arange(N)
        mu = k.astype(float) ** 2
        m = 2 if m is None else m
        if m != 2:
            raise ValueError("the one-dimensional example has exactly two boundary controls")
        table = np.stack([neumann_map_1d(delta, [1.0, 0.0], N), neumann_map_1d(delta, [0.0, 1.0], N)], axis=1)
        L = (delta + mu)[:, None] ** (0.75 - epsilon) * table
        boundary_table = table * (delta + mu)[:, None]
        index = k
    else:
        ij, mu = square_modes(N)
        m = 4 if m is None else m
        boundary_table = square_boundary_basis(ij, m)
        L = (delta + mu)[:, None] ** (0.75 - epsilon) * boundary_table / (delta + mu)[:, None]
        index = np.arange(N)
    g = (delta + mu) ** (0.25 + epsilon)
    sigma = np.maximum(index, 1).astype(float) ** (-theta)
    model = build_model(mu, sigma, g, L, beta=beta, a_G=0.0, C_G=None, lam=lam, p=p, spatial_dim=d,
                        labels={"example": "neumann", "delta": delta, "epsilon": epsilon, "theta": theta})
    reports = [
        check_noise_trace(model, gamma),
        check_smoothing(model),
        kernel_bound_audit(model),
        check_commutation(model),
    ]
    problems += [f"{r.condition_id} failed: {r.detail}" for r in reports if not r.satisfied]
    if problems:
        if not override:
            raise ValueError("Neumann instance rejected: " + "; ".join(problems))
        for msg in problems:
            log.warning("override: %s", msg)
    if cost is None:
        cost = _default_cost(N, box_radius, m)
    return NeumannInstance(d, float(delta), float(epsilon), float(theta), m, model, cost, reports, boundary_table)


# --------------------------------------------------------------------------
# control delay
# --------------------------------------------------------------------------

@dataclass(eq=False)
class DelayInstance:
    """Delay example in product-space form ``R x L^2(-d, 0)`` on a uniform delay grid.

    State coordinates: ``x[0]`` is the scalar state, ``x[j]`` the history variable at
    ``xi_j = -d + j h`` for ``j = 1..n_d``.  The model is driven by the abstract control
    ``|b| u`` along the unit direction ``b / |b|``.
    """

    a0: float
    b0: float
    sigma0: float
    d_lag: float
    n_d: int
    b1: np.ndarray
    b_norm: float
    model: LinearModel
    x0: np.ndarray
    cost: Optional[CostSpec] = None

    @property
    def h(self) -> float:
        return self.d_lag / self.n_d

    @property
    def grid(self) -> np.ndarray:
        return -self.d_lag + self.h * np.arange(1, self.n_d + 1)

    def abstract_control(self, u):
        return self.b_norm * np.asarray(u, dtype=float)

    def abstract_process(self, control: ControlProcess) -> ControlProcess:
        """Rescale a physical control process to the unit-direction model."""
        if control.is_simple:
            return ControlProcess.simple(control.jump_times, self.abstract_control(control.values), name=control.name)
        policy = control.policy
        return ControlProcess.feedback(lambda s: self.abstract_control(policy(s)), name=control.name)

    def inner(self, x, y) -> float:
        """Discrete inner product of the product space."""
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return float(x[..., 0] * y[..., 0] + self.h * np.sum(x[..., 1:] * y[..., 1:], axis=-1))


def _b1_function(b1, d_lag):
    if callable(b1):
        return b1
    samples = np.asarray(b1, dtype=float)
    xs = -d_lag + d_lag / samples.size * np.arange(1, samples.size + 1)
    return lambda s: np.interp(s, xs, samples)


def build_delay_instance(a0: float, b0: float, sigma0: float, d_lag: float, b1_samples, n_d: int,
                         cost: Optional[CostSpec] = None, u0: Optional[Callable] = None, y0: float = 0.0,
                         lam: float = 1.0) -> DelayInstance:
    """Discretise the delay example on ``n_d`` delay nodes.

    ``b1_samples`` is a callable kernel on ``[-d, 0]`` or its samples at the delay nodes; ``u0`` is the
    past control on ``[-d, 0)`` (zero when omitted).
    """
    if not sigma0 > 0:
        raise ValueError("sigma0 must be positive")
    if n_d < 2:
        raise ValueError("the delay grid needs at least two nodes")
    if not d_lag > 0:
        raise ValueError("the delay must be positive")
    h = d_lag / n_d
    xi = -d_lag + h * np.arange(1, n_d + 1)
    if callable(b1_samples):
        b1 = np.asarray(b1_samples(xi), dtype=float) * np.ones(n_d)
    else:
        b1 = np.asarray(b1_samples, dtype=float)
        if b1.size != n_d:
            b1 = _b1_function(b1, d_lag)(xi)
    b1_fun = _b1_function(b1_samples, d_lag)
    n = n_d + 1
    A = np.zeros((n, n))
    A[0, 0] = a0
    A[0, n_d] = 1.0
    for j in range(1, n):
        A[j, j] = -1.0 / h
        if j > 1:
            A[j, j - 1] = 1.0 / h
    b = np.concatenate([[b0], b1])
    b_norm = float(np.sqrt(b0**2 + h * np.sum(b1**2)))
    if b_norm == 0:
        raise ValueError("the control direction b vanishes")
    S = np.zeros((n, 1))
    S[0, 0] = sigma0
    model = LinearModel(A, S, (b / b_norm)[:, None], lam=lam,
                        labels={"example": "delay", "n_d": n_d, "d_lag": d_lag})
    x = np.zeros(n)
    x[0] = y0
    if u0 is not None:
        for j, xj in enumerate(xi):
            # x1(xi) = int_{-d}^{xi} b1(s) u0(s - xi) ds
            x[j + 1] = quad(lambda s: float(b1_fun(s)) * float(u0(s - xj)), -d_lag, xj, limit=200)[0] \
                if xj > -d_lag else 0.0
    return DelayInstance(float(a0), float(b0), float(sigma0), float(d_lag), int(n_d), b1, b_norm, model, x, cost)


def _control_signal(control: ControlProcess, u0: Optional[Callable]):
    def u(t):
        if t < 0:
            return float(u0(t)) if u0 is not None else 0.0
        return float(control.value_at(t)[0])
    return u


def _delay_integral(b1: Callable, u: Callable, t: float, d_lag: float, jumps=()):
    """``int_{-d}^0 b1(s) u(t + s) ds`` with the control jumps passed as quadrature breakpoints."""
    inner = sorted(tau - t for tau in jumps if -d_lag < tau - t < 0)
    return quad(lambda s: float(b1(s)) * u(t + s), -d_lag, 0.0, points=inner or None, limit=200)[0]


def delayed_mean_reference(a0, b0, d_lag, b1: Callable, control: ControlProcess, times,
                           u0: Optional[Callable] = None, y0: float = 0.0, rtol: float = 1e-10):
    """Mean of the scalar delayed SDE by direct ODE integration with adaptive delay quadrature.

    The delayed drift ``int b1(s) u(t + s) ds`` is integrated exactly (adaptive quadrature)
    at every solver evaluation; the noise is additive, so the mean solves the ODE.
    """
    u = _control_signal(control, u0)
    jumps = tuple(control.jump_times) + (0.0,)

    def rhs(t, y):
        return [a0 * y[0] + b0 * u(t) + _delay_integral(b1, u, t, d_lag, jumps)]

    times = np.asarray(times, dtype=float)
    # the delayed drift is only piecewise smooth: restart the integrator at every kink
    kinks = np.concatenate([[0.0], control.jump_times, control.jump_times + d_lag, times[-1:]])
    stops = np.unique(kinks[kinks <= times[-1]])
    out = np.empty(times.size)
    out[times == 0.0] = y0
    y = float(y0)
    for a, bnd in zip(stops[:-1], stops[1:]):
        sel = (times > a) & (times <= bnd)
        t_eval = np.unique(np.concatenate([times[sel], [bnd]]))
        sol = solve_ivp(rhs, (a, bnd), [y], t_eval=t_eval, rtol=rtol, atol=1e-12, method="DOP853")
        out[sel] = np.interp(times[sel], sol.t, sol.y[0])
        y = float(sol.y[0, -1])
    return out


def delayed_sde_euler(a0, b0, sigma0, d_lag, b1: Callable, control: ControlProcess, T: float, dt: float,
                      n_paths: int = 0, seed: int = 0, u0: Optional[Callable] = None, y0: float = 0.0):
    """Euler-Maruyama for the scalar delayed SDE with the delay integral computed by quadrature.

    Returns ``(times, paths)``; ``n_paths = 0`` returns the noise-free (mean) path.
    """
    steps = int(round(T / dt))
    times = dt * np.arange(steps + 1)
    u = _control_signal(control, u0)
    drift_in = np.array([b0 * u(t) + _delay_integral(b1, u, t, d_lag, tuple(control.jump_times) + (0.0,))
                         for t in times[:-1]])
    rows = max(n_paths, 1)
    y = np.full(rows, float(y0))
    paths = np.empty((rows, steps + 1))
    paths[:, 0] = y
    for i in range(steps):
        noise = stream(seed, i).standard_normal(rows) if n_paths else 0.0
        y = y + (a0 * y + drift_in[i]) * dt + sigma0 * np.sqrt(dt) * noise
        paths[:, i + 1] = y
    return times, (paths if n_paths else paths[0])
