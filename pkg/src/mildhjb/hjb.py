"""Hamiltonians, the mild HJB fixed-point solver and feedback synthesis.

The value function is represented on a tensor grid over a few leading modes.  The running
cost depends on those modes only and the uncontrolled dynamics are diagonal, so the mild
fixed-point map keeps that structure exactly: the remaining modes integrate out.

On the grid, the source term ``h = l1 + F0(., D^G v)`` is read as its multilinear
interpolant (constant beyond the edges).  Gaussian expectations of such interpolants
reduce per axis to expectations of ramps ``(X - a)^+``, which are available in closed form,
so the resolvent and its G-gradient become exact linear maps on node values.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.ndimage import map_coordinates, spline_filter
from scipy.optimize import minimize
from scipy.special import ndtr

from .dynamics import Box, ControlProcess
from .model import SpectralModel, gamma_norm, relaxation_integral
from .semigroup import laplace_panels

__all__ = [
    "QuadraticControlCost",
    "ConvexControlCost",
    "SaturatingRidgeCost",
    "CostSpec",
    "GridSpec",
    "ValueField",
    "hamiltonian_FCV",
    "hamiltonian_F0",
    "control_argmin",
    "control_argmax",
    "control_lipschitz_constant",
    "contraction_constant",
    "solve_mild_hjb",
    "strict_form_residual",
    "generator_of_field",
    "feedback_map",
    "feedback_policy",
]

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# costs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QuadraticControlCost:
    """``l2(u) = scale/2 |u|^2``; argmin and argmax over boxes in closed form.

    ``scale = 0`` gives the zero cost, whose minimiser over a box is a vertex (ties go to the
    lower end so the choice is deterministic).
    """

    scale: float = 1.0

    def __post_init__(self):
        if not self.scale >= 0:
            raise ValueError("quadratic control cost needs a nonnegative scale")

    @property
    def coercive(self) -> bool:
        return self.scale > 0

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        return 0.5 * self.scale * np.sum(u * u, axis=-1)

    def minimize(self, p, box: Box):
        """Minimiser of ``<u, p> + l2(u)`` over the box (coordinatewise clamp)."""
        p = np.asarray(p, dtype=float)
        if self.scale > 0:
            return box.project(-p / self.scale)
        if not box.bounded:
            raise ValueError("linear control cost on an unbounded set has no minimiser")
        return np.where(p < 0, box.upper, box.lower) + 0.0 * p

    def maximize(self, p, box: Box):
        """Maximiser of ``<u, p> + l2(u)`` over a bounded box (a vertex; ties go to the lower end)."""
        if not box.bounded:
            raise ValueError("argmax needs a bounded control set")
        p = np.asarray(p, dtype=float)
        lo = box.lower * p + 0.5 * self.scale * box.lower**2
        hi = box.upper * p + 0.5 * self.scale * box.upper**2
        return np.where(hi > lo, box.upper, box.lower)

    def sup_over(self, box: Box) -> float:
        """``max l2`` over a bounded box (attained at a vertex)."""
        if not box.bounded:
            return np.inf
        return float(0.5 * self.scale * np.sum(np.maximum(box.lower**2, box.upper**2)))


def _lexicographic_refine(obj, u, f_best, bounds, rtol=1e-9):
    """Smallest argmin in lexicographic order: lower each coordinate in turn inside the argmin set."""
    u = np.array(u, dtype=float)
    slack = rtol * (1.0 + abs(f_best))
    bounds = list(bounds)
    cons = [{"type": "ineq", "fun": lambda z: f_best + slack - obj(z)}]
    for i in range(u.size):
        res = minimize(lambda z, i=i: z[i], u, method="SLSQP", bounds=bounds, constraints=cons)
        if res.x[i] < u[i] and obj(res.x) <= f_best + slack:
            u = res.x
        bounds[i] = (u[i], u[i])
    return u


@dataclass(frozen=True, eq=False)
class ConvexControlCost:
    """Generic convex ``l2`` minimised numerically (bounded boxes or coercive costs only)."""

    func: Callable
    coercive: bool = False
    n_starts: int = 3

    def __call__(self, u):
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            return float(self.func(u))
        flat = u.reshape(-1, u.shape[-1])
        return np.array([self.func(row) for row in flat]).reshape(u.shape[:-1])

    def _optimize(self, p, box: Box, sign: float):
        p = np.atleast_2d(np.asarray(p, dtype=float))
        out = np.empty_like(p)
        bounds = [(None if not np.isfinite(a) else a, None if not np.isfinite(b) else b)
                  for a, b in zip(box.lower, box.upper)]
        rng = np.random.default_rng(0)
        for i, row in enumerate(p):
            best, best_val = None, np.inf
            starts = [box.project(np.zeros(box.dim))] + [box.sample(rng) for _ in range(self.n_starts - 1)]
            for u0 in starts:
                res = minimize(lambda u: sign * (u @ row + self.func(u)), u0, method="L-BFGS-B", bounds=bounds)
                # lexicographic tie-break among numerically equal minima
                if res.fun < best_val - 1e-12 or (abs(res.fun - best_val) <= 1e-12 and tuple(res.x) < tuple(best)):
                    best, best_val = res.x, res.fun
            out[i] = _lexicographic_refine(lambda u: sign * (u @ row + self.func(u)), best, best_val, bounds)
        return out.reshape(np.shape(p)) if out.shape[0] > 1 else out[0]

    def minimize(self, p, box: Box):
        p = np.asarray(p, dtype=float)
        res = self._optimize(p, box, 1.0)
        return res.reshape(p.shape)

    def maximize(self, p, box: Box):
        if not box.bounded:
            raise ValueError("argmax needs a bounded control set")
        p = np.asarray(p, dtype=float)
        return self._optimize(p, box, -1.0).reshape(p.shape)

    def sup_over(self, box: Box) -> float:
        """``max l2`` over a bounded box; a convex function peaks at a vertex."""
        if not box.bounded:
            return np.inf
        return max(float(self.func(np.asarray(c))) for c in itertools.product(*zip(box.lower, box.upper)))


@dataclass(frozen=True)
class SaturatingRidgeCost:
    """Bounded state cost ``1 - exp(-<x, w>^2)`` depending on the modes where ``w`` is nonzero."""

    weight: tuple

    def __post_init__(self):
        object.__setattr__(self, "weight", tuple(float(v) for v in self.weight))

    @property
    def support(self) -> tuple:
        return tuple(i for i, v in enumerate(self.weight) if v != 0.0)

    @property
    def bounds(self) -> tuple:
        return (0.0, 1.0)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        w = np.zeros(x.shape[-1])
        n = min(len(self.weight), x.shape[-1])
        w[:n] = self.weight[:n]
        s = x @ w
        return 1.0 - np.exp(-s * s)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Running cost ``l(x, u) = l1(x) + l2(u)`` with controls restricted to the box ``box``.

    ``l1`` maps state batches ``(..., n)`` to values.  ``l1_bounds`` are known lower and upper
    bounds of ``l1``; ``support`` lists the modes ``l1`` depends on (defaults to the attributes
    of ``l1`` when it provides them).
    """

    l1: Callable
    l2: object = field(default_factory=QuadraticControlCost)
    box: Optional[Box] = None
    l1_bounds: Optional[tuple] = None
    support: Optional[tuple] = None

    def __post_init__(self):
        if self.l1_bounds is None and hasattr(self.l1, "bounds"):
            object.__setattr__(self, "l1_bounds", tuple(self.l1.bounds))
        if self.support is None and hasattr(self.l1, "support"):
            object.__setattr__(self, "support", tuple(self.l1.support))
        if self.l1_bounds is not None and not np.isfinite(self.l1_bounds[0]):
            raise ValueError("the running cost must be bounded from below")
        if self.box is not None and not self.box.bounded and not getattr(self.l2, "coercive", False):
            raise ValueError("non-coercive l2 on an unbounded control set: F0 = -inf risk")

    def control_box(self, m: int) -> Box:
        return self.box if self.box is not None else Box.full(m)

    def running(self, x, u):
        return self.l1(x) + self.l2(u)

    def l2_min(self, m: int) -> float:
        box = self.control_box(m)
        u = self.l2.minimize(np.zeros(m), box)
        return float(self.l2(u))

    def lower_bound(self, m: int) -> float:
        if self.l1_bounds is None:
            raise ValueError("l1 bounds unknown")
        return float(self.l1_bounds[0]) + self.l2_min(m)


def _check_finite_hamiltonian(cost: CostSpec, m: int) -> Box:
    box = cost.control_box(m)
    if not box.bounded and not getattr(cost.l2, "coercive", False):
        raise ValueError("non-coercive l2 on an unbounded control set: F0 = -inf risk")
    return box


def control_argmin(cost: CostSpec, model, q):
    """Minimiser of ``<L u, q> + l2(u)`` over the control box (batched over leading axes of ``q``)."""
    box = _check_finite_hamiltonian(cost, model.n_controls)
    return cost.l2.minimize(model.control_adjoint(q), box)


def control_argmax(cost: CostSpec, model, q):
    """Maximiser of ``<L u, q> + l2(u)``; used only to build deliberately bad feedback."""
    box = cost.control_box(model.n_controls)
    return cost.l2.maximize(model.control_adjoint(q), box)


def _control_part(cost: CostSpec, model, q):
    """``min_u <L u, q> + l2(u)`` for a batch of gradients."""
    u = control_argmin(cost, model, q)
    return np.sum(model.control_drift(u) * q, axis=-1) + cost.l2(u)


def hamiltonian_FCV(cost: CostSpec, model, x, q, u):
    """Unminimised Hamiltonian ``<L u, q> + l(x, u)``."""
    u = np.asarray(u, dtype=float)
    box = cost.control_box(model.n_controls)
    if not np.all(box.contains(u)):
        raise ValueError("control value outside the admissible set")
    q = np.asarray(q, dtype=float)
    return np.sum(model.control_drift(u) * q, axis=-1) + cost.running(x, u)


def hamiltonian_F0(cost: CostSpec, model, x, q):
    """``F0(x, q) = inf_u <L u, q> + l(x, u)`` over the control box."""
    return cost.l1(x) + _control_part(cost, model, np.asarray(q, dtype=float))


def control_lipschitz_constant(cost: CostSpec, model, modes: Optional[Sequence[int]] = None) -> float:
    """``sup_u |(L u)_modes|`` over a bounded box; the Lipschitz constant of ``F0`` in ``q``."""
    box = cost.control_box(model.n_controls)
    if not box.bounded:
        raise ValueError("the Lipschitz constant of F0 needs a bounded control set")
    L = model.control_map if modes is None else model.control_map[list(modes)]
    # |L u| is convex in u, so its maximum over the box sits at a vertex
    best = 0.0
    for corner in itertools.product(*zip(box.lower, box.upper)):
        best = max(best, float(np.linalg.norm(L @ np.asarray(corner))))
    return best


def _gamma_laplace(model: SpectralModel, lam: float, n_panels: int = 40, order: int = 12) -> float:
    """``int_0^inf e^{-lam s} gamma_norm(s) ds`` via ``s = r^2`` to absorb the ``s^-1/2`` singularity."""
    rate = max(float(model.mu.max()), 1.0)
    r_max = np.sqrt(60.0 / lam)
    first = 1e-4 * min(1.0 / np.sqrt(lam), 1.0 / np.sqrt(rate), r_max)
    edges = np.concatenate([[0.0], np.geomspace(first, r_max, n_panels)])
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    r = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
    wr = (0.5 * (b - a) * w).ravel()
    s = r * r
    return float(np.sum(wr * 2.0 * r * np.exp(-lam * s) * gamma_norm(model, s)))


def contraction_constant(model: SpectralModel, cost: CostSpec, modes: Sequence[int]) -> float:
    """Lipschitz constant of the fixed-point map on G-gradients restricted to ``modes``.

    ``C_F0 * int_0^inf e^{-lam s} |Q_s^{-1/2} e^{sA} G| ds`` with both factors computed on
    the gradient-carrying modes.
    """
    sub = model.restrict(modes)
    return control_lipschitz_constant(cost, model, modes) * _gamma_laplace(sub, model.lam)


# --------------------------------------------------------------------------
# exact Gaussian expectations of clamped multilinear interpolants
# --------------------------------------------------------------------------

def _ramp_expectation(mean, std, knots):
    """``E (X - knot)^+`` and its mean-derivative for ``X ~ N(mean, std^2)``; shape (len mean, len knots)."""
    mean = np.asarray(mean, dtype=float)[:, None]
    std = max(float(std), 1e-300)
    d = mean - np.asarray(knots, dtype=float)[None, :]
    z = d / std
    cdf = ndtr(z)
    pdf = np.exp(-0.5 * z * z) / np.sqrt(2.0 * np.pi)
    return d * cdf + std * pdf, cdf


def hat_weights(axis: np.ndarray, mean, std):
    """Matrices ``W[i, j] = E hat_j(m_i + std Z)`` and ``dW = dW/dm`` for clamped hat functions."""
    axis = np.asarray(axis, dtype=float)
    n = axis.size
    ramp, dramp = _ramp_expectation(mean, std, axis)
    inv = 1.0 / np.diff(axis)
    # slopes of the ramp decomposition: hat_j = c + sum_k coeff[k, j] (x - y_k)^+
    coeff = np.zeros((n, n))
    for j in range(n):
        if j > 0:
            coeff[j - 1, j] += inv[j - 1]
            coeff[j, j] -= inv[j - 1]
        if j < n - 1:
            coeff[j, j] -= inv[j]
            coeff[j + 1, j] += inv[j]
    # the ramp at the last node never contributes (constant extension)
    coeff[n - 1, :] = 0.0
    const = np.zeros(n)
    const[0] = 1.0
    return const[None, :] + ramp @ coeff, dramp @ coeff


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid over leading modes: node count per axis and half-widths (auto when None)."""

    modes: tuple = (0, 1)
    n_nodes: int = 41
    half_width: Optional[tuple] = None
    n_std: float = 5.0
    n_panels: int = 40
    order: int = 10

    def resolve_half_width(self, model: SpectralModel, drift_bound: np.ndarray) -> np.ndarray:
        if self.half_width is not None:
            return np.broadcast_to(np.asarray(self.half_width, dtype=float), (len(self.modes),)).copy()
        out = []
        for j, mode in enumerate(self.modes):
            mu, q = model.mu[mode], model.noise_variance[mode]
            var = q / (2 * mu) if mu > 0 else q / model.lam
            # controlled displacement over the discount horizon
            shift = drift_bound[j] / max(mu, model.lam)
            out.append(self.n_std * np.sqrt(var) + 2.0 * shift)
        return np.array(out)


@dataclass(eq=False)
class ValueField:
    """Value function on a tensor grid over leading modes, with its G-gradient at the nodes.

    Off-grid evaluation is multilinear with clamping to the grid box.  ``mild`` evaluates the
    fixed-point representation exactly at arbitrary states from the stored source term.
    """

    modes: tuple
    axes: list
    values: np.ndarray
    gradient: np.ndarray
    n_state: int
    source: Optional[np.ndarray] = None
    lam: float = 1.0
    contraction_constant: float = np.nan
    measured_ratio: float = np.nan
    ratio_history: list = field(default_factory=list)
    change_history: list = field(default_factory=list)
    iterations: int = 0
    residual: float = np.nan
    budget: float = np.nan
    diagnostics: dict = field(default_factory=dict)
    _model: Optional[SpectralModel] = field(default=None, repr=False)
    _quad: Optional[tuple] = field(default=None, repr=False)

    def __post_init__(self):
        self.axes = [np.asarray(a, dtype=float) for a in self.axes]
        shape = tuple(a.size for a in self.axes)
        if self.values.shape != shape or self.gradient.shape != shape + (self.n_state,):
            raise ValueError("value field arrays do not match the grid")
        self._interp_v = RegularGridInterpolator(self.axes, self.values, method="linear")
        self._interp_g = RegularGridInterpolator(self.axes, self.gradient, method="linear")
        self._spline = None

    @property
    def m_lead(self) -> int:
        return len(self.modes)

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    @property
    def lower(self) -> np.ndarray:
        return np.array([a[0] for a in self.axes])

    @property
    def upper(self) -> np.ndarray:
        return np.array([a[-1] for a in self.axes])

    def lead(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x[..., list(self.modes)]

    def _clamped(self, x):
        y = self.lead(x)
        return np.clip(y, self.lower, self.upper)

    def __call__(self, x):
        y = self._clamped(x)
        out = self._interp_v(y.reshape(-1, self.m_lead))
        return out.reshape(y.shape[:-1]) if y.ndim > 1 else float(out[0])

    def g_gradient(self, x):
        y = self._clamped(x)
        out = self._interp_g(y.reshape(-1, self.m_lead))
        return out.reshape(y.shape[:-1] + (self.n_state,))

    def nodes(self) -> np.ndarray:
        """Node coordinates as an array ``(n_nodes, m_lead)`` in C order."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([g.ravel() for g in mesh], axis=1)

    def embed(self, y) -> np.ndarray:
        """Full states with lead coordinates ``y`` and zeros elsewhere."""
        y = np.asarray(y, dtype=float)
        x = np.zeros(y.shape[:-1] + (self.n_state,))
        x[..., list(self.modes)] = y
        return x

    # --- smooth reconstruction ---------------------------------------------
    def spline(self, x, order: int = 3):
        """Cubic-spline reconstruction of ``v`` (C^2 inside the grid)."""
        if self._spline is None:
            self._spline = spline_filter(self.values, order=3, mode="nearest")
        y = self._clamped(x)
        idx = [(y[..., j] - a[0]) / (a[1] - a[0]) for j, a in enumerate(self.axes)]
        coords = np.stack([np.ravel(c) for c in idx])
        out = map_coordinates(self._spline, coords, order=order, mode="nearest", prefilter=False)
        return out.reshape(y.shape[:-1]) if y.ndim > 1 else float(out[0])

    # --- exact evaluation of the mild representation ------------------------
    def mild(self, x):
        """Exact ``(v, D^G v)`` at states ``x`` from the stored source term."""
        if self.source is None or self._model is None:
            raise ValueError("this field carries no source term")
        model = self._model
        nodes, coeffs = self._quad
        y = np.atleast_2d(self.lead(x))
        vals = np.zeros(y.shape[0])
        grads = np.zeros((y.shape[0], self.n_state))
        for s, c in zip(nodes, coeffs):
            Ws, dWs = [], []
            for j, mode in enumerate(self.modes):
                decay = np.exp(-model.mu[mode] * s)
                std = np.sqrt(model.noise_variance[mode] * relaxation_integral(2 * model.mu[mode], s))
                W, dW = hat_weights(self.axes[j], decay * y[:, j], std)
                Ws.append(W)
                dWs.append(dW * decay)
            vals += c * _contract_rows(Ws, self.source)
            for j, mode in enumerate(self.modes):
                mats = list(Ws)
                mats[j] = dWs[j]
                grads[:, mode] += c * model.g_diag[mode] * _contract_rows(mats, self.source)
        if np.ndim(x) == 1:
            return float(vals[0]), grads[0]
        return vals.reshape(np.shape(x)[:-1]), grads.reshape(np.shape(x)[:-1] + (self.n_state,))

    def interpolation_error(self) -> float:
        """Largest gap between multilinear interpolation and exact evaluation at cell centres."""
        centers = [0.5 * (a[1:] + a[:-1]) for a in self.axes]
        mesh = np.meshgrid(*centers, indexing="ij")
        pts = self.embed(np.stack([g.ravel() for g in mesh], axis=1))
        exact, _ = self.mild(pts)
        return float(np.max(np.abs(exact - self(pts))))


def _contract_rows(mats, H):
    """For each evaluation row r: ``sum_{i,j,..} mats[0][r,i] mats[1][r,j] ... H[i,j,...]``."""
    T = H
    # contract the last axis first, keeping the row index in front
    out = np.einsum("ri,i...->r...", mats[0], T)
    for M in mats[1:]:
        out = np.einsum("rj,rj...->r...", M, out)
    return out


# --------------------------------------------------------------------------
# the solver
# --------------------------------------------------------------------------

def _operator_stacks(model, modes, axes, nodes):
    """Per-axis hat-weight matrices at every quadrature node (rows = grid nodes)."""
    W = [np.empty((nodes.size, a.size, a.size)) for a in axes]
    dW = [np.empty_like(w) for w in W]
    for qi, s in enumerate(nodes):
        for j, mode in enumerate(modes):
            decay = np.exp(-model.mu[mode] * s)
            std = np.sqrt(model.noise_variance[mode] * relaxation_integral(2 * model.mu[mode], s))
            w, dw = hat_weights(axes[j], decay * axes[j], std)
            W[j][qi] = w
            dW[j][qi] = dw * decay * model.g_diag[mode]
    return W, dW


def _apply(stacks, coeffs, H):
    """``sum_q coeffs[q] (M_0[q] (x) M_1[q] (x) ...) H`` for a tensor ``H``."""
    d = H.ndim
    out_l, in_l = "abcdefg"[:d], "ijklmno"[:d]
    T, cur = H, in_l
    for j, M in enumerate(stacks):
        new = "q" + out_l[: j + 1] + in_l[j + 1:]
        T = np.einsum(f"q{out_l[j]}{in_l[j]},{cur}->{new}", M, T, optimize=True)
        cur = new
    return np.tensordot(coeffs, T, axes=(0, 0))


def solve_mild_hjb(model: SpectralModel, cost: CostSpec, grid_spec: GridSpec = GridSpec(),
                   tol: float = 1e-9, max_iter: int = 200) -> ValueField:
    """Fixed-point iteration for the mild HJB equation on a leading-mode grid.

    Iterates ``h_n = l1 + min_u(<L u, q_n> + l2(u))``, ``v_{n+1} = R h_n``, ``q_{n+1} = R^G h_n``
    where ``R`` and ``R^G`` are the discounted resolvent and its G-gradient, evaluated exactly
    on multilinear interpolants.  Raises when the contraction constant is at least one or
    when ``max_iter`` is exceeded.
    """
    if not isinstance(model, SpectralModel):
        raise TypeError("the grid solver needs a diagonal spectral model")
    modes = tuple(int(m) for m in grid_spec.modes)
    if cost.support is not None and not set(cost.support) <= set(modes):
        raise ValueError(f"the state cost depends on modes {cost.support} outside the grid modes {modes}")
    kappa = contraction_constant(model, cost, modes)
    if not kappa < 1.0:
        raise ValueError(f"lambda below solvable threshold: contraction constant {kappa:.4g} >= 1")
    lam = model.lam
    box = cost.control_box(model.n_controls)
    L_lead = model.control_map[list(modes)]
    drift_bound = np.abs(model.g_diag[list(modes)]) * np.max(
        np.abs(np.stack([L_lead @ np.asarray(c) for c in itertools.product(*zip(box.lower, box.upper))])), axis=0)
    half = grid_spec.resolve_half_width(model, drift_bound)
    axes = [np.linspace(-r, r, grid_spec.n_nodes) for r in half]

    sup_l = 1.0 if cost.l1_bounds is None else max(abs(cost.l1_bounds[0]), abs(cost.l1_bounds[1]))
    sup_h = sup_l + abs(cost.l2_min(model.n_controls)) + control_lipschitz_constant(cost, model, modes) * 10.0
    t_max = max(12.0 / lam, np.log(max(sup_h, 1.0) / (lam * tol * 1e-2)) / lam)
    rate = max(float(model.mu[list(modes)].max()), lam)
    s_nodes, s_weights = laplace_panels(lam, rate, t_max, grid_spec.n_panels, grid_spec.order)
    coeffs = s_weights * np.exp(-lam * s_nodes)
    tail = sup_h * np.exp(-lam * t_max) / lam

    W, dW = _operator_stacks(model, modes, axes, s_nodes)
    mesh = np.meshgrid(*axes, indexing="ij")
    lead_nodes = np.stack([g.ravel() for g in mesh], axis=1)
    states = np.zeros((lead_nodes.shape[0], model.n_modes))
    states[:, list(modes)] = lead_nodes
    l1_nodes = np.asarray(cost.l1(states), dtype=float).reshape(mesh[0].shape)

    shape = mesh[0].shape
    q = np.zeros(shape + (model.n_modes,))
    v = np.zeros(shape)
    ratios, changes = [], []
    prev_dq = None
    iterations = 0
    H = l1_nodes
    converged = False
    for it in range(1, max_iter + 1):
        H = l1_nodes + _control_part(cost, model, q)
        v_new = _apply(W, coeffs, H)
        q_new = np.zeros_like(q)
        for j, mode in enumerate(modes):
            stacks = list(W)
            stacks[j] = dW[j]
            q_new[..., mode] = _apply(stacks, coeffs, H)
        dv = float(np.max(np.abs(v_new - v)))
        dq = float(np.max(np.linalg.norm(q_new - q, axis=-1)))
        if prev_dq is not None and prev_dq > 1e-13:
            ratios.append(dq / prev_dq)
        prev_dq = dq
        changes.append(max(dv, dq))
        v, q = v_new, q_new
        if max(dv, dq) < tol:
            converged = True
            break
        iterations = it
    if not converged:
        raise RuntimeError(f"fixed-point iteration did not reach tol={tol:g} in {max_iter} iterations")
    # the reported source is the one that produced the final (v, q)
    field_ = ValueField(
        modes=modes, axes=axes, values=v, gradient=q, n_state=model.n_modes, source=H, lam=lam,
        contraction_constant=kappa, measured_ratio=float(max(ratios)) if ratios else 0.0,
        ratio_history=ratios, change_history=changes, iterations=iterations, residual=changes[-1],
        _model=model, _quad=(s_nodes, coeffs),
    )
    # error budget: source interpolation error propagated through the resolvent, fixed-point
    # error and the Laplace tail
    h_err = _source_interpolation_error(field_, model, cost)
    interp_v = field_.interpolation_error()
    fixed = changes[-1] / max(1.0 - kappa, 1e-12)
    field_.budget = h_err / (lam * (1.0 - kappa)) + interp_v + fixed + tail
    field_.diagnostics.update({
        "source_interpolation_error": h_err, "value_interpolation_error": interp_v,
        "fixed_point_error": fixed, "laplace_tail": tail, "half_width": half.tolist(),
        "quadrature_nodes": int(s_nodes.size),
    })
    return field_


def _source_interpolation_error(v: ValueField, model, cost) -> float:
    """Gap between the interpolated source and the source built from exact gradients at cell centres."""
    centers = [0.5 * (a[1:] + a[:-1]) for a in v.axes]
    mesh = np.meshgrid(*centers, indexing="ij")
    pts = v.embed(np.stack([g.ravel() for g in mesh], axis=1))
    _, grads = v.mild(pts)
    exact_h = cost.l1(pts) + _control_part(cost, model, grads)
    interp = RegularGridInterpolator(v.axes, v.source, method="linear")(v.lead(pts))
    return float(np.max(np.abs(exact_h - interp)))


# --------------------------------------------------------------------------
# strict form and feedback
# --------------------------------------------------------------------------

def generator_of_field(model: SpectralModel, v: ValueField, x, h0: Optional[float] = None, order: int = 40):
    """Uncontrolled generator applied to the spline reconstruction of ``v`` at ``x``.

    Computes ``(P_h v - v)/h`` by tensor Gauss-Hermite quadrature for ``h0, h0/2, h0/4`` and
    Richardson-extrapolates to ``h -> 0``.
    """
    x = np.asarray(x, dtype=float)
    if h0 is None:
        spacing = min(a[1] - a[0] for a in v.axes)
        q_max = max(model.noise_variance[list(v.modes)])
        h0 = 0.5 * spacing**2 / q_max
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / np.sqrt(2 * np.pi)
    grids = np.meshgrid(*[nodes] * v.m_lead, indexing="ij")
    w_tensor = np.ones(grids[0].shape)
    for j in range(v.m_lead):
        shape = [1] * v.m_lead
        shape[j] = nodes.size
        w_tensor = w_tensor * weights.reshape(shape)
    base = v.spline(x)

    def diff_quotient(h):
        pts = np.zeros(grids[0].shape + (v.n_state,))
        for j, mode in enumerate(v.modes):
            mean = np.exp(-model.mu[mode] * h) * x[mode]
            std = np.sqrt(model.noise_variance[mode] * relaxation_integral(2 * model.mu[mode], h))
            pts[..., mode] = mean + std * grids[j]
        return (np.sum(w_tensor * v.spline(pts)) - base) / h

    d1, d2, d3 = diff_quotient(h0), diff_quotient(h0 / 2), diff_quotient(h0 / 4)
    r1, r2 = 2 * d2 - d1, 2 * d3 - d2
    return (4 * r2 - r1) / 3


def strict_form_residual(model: SpectralModel, cost: CostSpec, v: ValueField, x, h0: Optional[float] = None):
    """``lam v(x) - A v(x) - F0(x, D^G v(x))`` at an interior point ``x`` of the grid."""
    x = np.asarray(x, dtype=float)
    y = v.lead(x)
    if np.any(y <= v.lower) or np.any(y >= v.upper):
        raise ValueError("strict-form residual needs a point strictly inside the grid")
    Av = generator_of_field(model, v, x, h0)
    return float(model.lam * v.spline(x) - Av - hamiltonian_F0(cost, model, x, v.g_gradient(x)))


def feedback_map(cost: CostSpec, model, v: ValueField, x):
    """Minimiser of ``<L u, D^G v(x)> + l2(u)`` over the control box."""
    return control_argmin(cost, model, v.g_gradient(x))


def feedback_policy(cost: CostSpec, model, v: ValueField, adversarial: bool = False, name: str = "") -> ControlProcess:
    """Closed-loop control built from ``v``; ``adversarial=True`` swaps the argmin for an argmax."""
    box = cost.control_box(model.n_controls)
    if adversarial:
        def policy(states):
            return control_argmax(cost, model, v.g_gradient(states))
    else:
        def policy(states):
            return control_argmin(cost, model, v.g_gradient(states))
    return ControlProcess.feedback(policy, box=box, name=name or ("argmax feedback" if adversarial else "feedback"))
