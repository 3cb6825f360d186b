"""Transition semigroup, generator and resolvent on cylinder test functions.

Cylinder functions here are ridge functions ``f(x) = h(<a, x>)``.  Under a Gaussian law the
ridge variable ``<a, X>`` is scalar Gaussian, so expectations reduce to one-dimensional
closed forms; the trig and Gaussian-bump families are even closed under the semigroup.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .model import LinearModel, SpectralModel, check_smoothing
from .rng import stream

__all__ = [
    "CylinderFunction",
    "Scheme",
    "Estimate",
    "apply_semigroup",
    "semigroup_estimate",
    "apply_generator",
    "resolvent",
    "g_gradient_semigroup",
    "g_gradient_closed_form",
    "semigroup_property_audit",
    "ridge_law",
    "laplace_panels",
]

KINDS = ("trig", "gauss-bump", "constant")


@dataclass(frozen=True, eq=False)
class CylinderFunction:
    """Ridge function of finitely many modes.

    * ``trig``:       ``amplitude * cos(<a, x> + phase)``
    * ``gauss-bump``: ``amplitude * exp(-(<a, x> - center)^2 / (2 width^2))``
    * ``constant``:   ``amplitude``

    ``direction`` may be shorter than the state; missing entries are zero.
    """

    kind: str
    direction: np.ndarray
    amplitude: float = 1.0
    phase: float = 0.0
    center: float = 0.0
    width: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown cylinder kind {self.kind!r}")
        a = np.atleast_1d(np.asarray(self.direction, dtype=float)).copy()
        a.setflags(write=False)
        object.__setattr__(self, "direction", a)
        if self.kind == "gauss-bump" and not self.width > 0:
            raise ValueError("bump width must be positive")

    # constructors -----------------------------------------------------------
    @classmethod
    def trig(cls, direction, amplitude=1.0, phase=0.0):
        return cls("trig", direction, amplitude=amplitude, phase=phase)

    @classmethod
    def bump(cls, direction, amplitude=1.0, center=0.0, width=1.0):
        return cls("gauss-bump", direction, amplitude=amplitude, center=center, width=width)

    @classmethod
    def constant(cls, value, dim=1):
        return cls("constant", np.zeros(dim), amplitude=value)

    # profile ----------------------------------------------------------------
    def profile(self, s, order: int = 0):
        """``h^(order)(s)`` for ``order`` in 0, 1, 2."""
        s = np.asarray(s, dtype=float)
        A = self.amplitude
        if self.kind == "constant":
            return np.full(s.shape, A if order == 0 else 0.0)
        if self.kind == "trig":
            z = s + self.phase
            return A * (np.cos(z), -np.sin(z), -np.cos(z))[order]
        z = (s - self.center) / self.width
        base = A * np.exp(-0.5 * z * z)
        if order == 0:
            return base
        if order == 1:
            return -z / self.width * base
        return (z * z - 1.0) / self.width**2 * base

    @property
    def sup_norm(self) -> float:
        return abs(self.amplitude)

    def padded_direction(self, dim: int) -> np.ndarray:
        a = self.direction
        if a.size > dim:
            if np.any(a[dim:] != 0):
                raise ValueError("cylinder direction reaches outside the truncation")
            return a[:dim]
        if a.size < dim:
            return np.concatenate([a, np.zeros(dim - a.size)])
        return a

    def ridge(self, x):
        x = np.asarray(x, dtype=float)
        return x @ self.padded_direction(x.shape[-1])

    def __call__(self, x):
        return self.profile(self.ridge(x))

    def gradient(self, x):
        x = np.asarray(x, dtype=float)
        a = self.padded_direction(x.shape[-1])
        return self.profile(self.ridge(x), 1)[..., None] * a

    def hessian(self, x):
        x = np.asarray(x, dtype=float)
        a = self.padded_direction(x.shape[-1])
        return self.profile(self.ridge(x), 2)[..., None, None] * np.outer(a, a)

    def g_gradient(self, model, x):
        """``D^G f(x) = h'(<a,x>) G* a``."""
        x = np.asarray(x, dtype=float)
        a = self.padded_direction(model.state_dim)
        return self.profile(self.ridge(x), 1)[..., None] * model.g_adjoint(a)

    def shifted(self, offset: float, variance: float, new_direction) -> "CylinderFunction":
        """Cylinder ``x -> E h(<new_direction, x> + offset + sqrt(variance) Z)``."""
        if self.kind == "constant":
            return self
        if self.kind == "trig":
            return replace(self, direction=new_direction, amplitude=self.amplitude * np.exp(-0.5 * variance),
                           phase=self.phase + offset)
        w2 = self.width**2 + variance
        return replace(self, direction=new_direction, amplitude=self.amplitude * self.width / np.sqrt(w2),
                       center=self.center - offset, width=np.sqrt(w2))

    def propagate(self, model, t: float, k=None) -> "CylinderFunction":
        """Closed form of ``P_t^{(k)} f`` as another cylinder of the same kind."""
        if t < 0:
            raise ValueError("semigroup time must be nonnegative")
        if self.kind == "constant" or t == 0:
            return self
        a = self.padded_direction(model.state_dim)
        offset, variance, new_dir = ridge_law(model, a, t, k)
        return self.shifted(offset, variance, new_dir)

    def expectation(self, mean_ridge, variance):
        """``E h(S)`` with ``S ~ N(mean_ridge, variance)``."""
        m = np.asarray(mean_ridge, dtype=float)
        if self.kind == "constant":
            return np.full(m.shape, self.amplitude)
        if self.kind == "trig":
            return self.amplitude * np.cos(m + self.phase) * np.exp(-0.5 * variance)
        w2 = self.width**2 + variance
        return self.amplitude * self.width / np.sqrt(w2) * np.exp(-0.5 * (m - self.center) ** 2 / w2)


def ridge_law(model, a: np.ndarray, t: float, k=None):
    """Law of ``<a, X(t;x)>`` as ``<new_direction, x> + offset + N(0, variance)``."""
    if isinstance(model, LinearModel):
        Phi, _, cov, _ = model._blocks(t)
        new_dir = Phi.T @ a
        variance = float(a @ cov @ a)
    else:
        new_dir = model.decay(t) * a
        variance = float(np.sum(model.covariance(t) * a * a))
    offset = 0.0
    if k is not None:
        drift_mean, _ = model.gaussian_law(t, np.zeros(model.state_dim), k)
        offset = float(a @ drift_mean)
    return offset, variance, new_dir


@dataclass(frozen=True)
class Scheme:
    """How to evaluate a Gaussian expectation: closed form, Gauss-Hermite or Monte Carlo."""

    kind: str = "closed-form"
    order: int = 24
    n_samples: int = 10_000
    seed: int = 0

    @classmethod
    def closed_form(cls):
        return cls("closed-form")

    @classmethod
    def gauss_hermite(cls, order: int = 24):
        return cls("gauss-hermite", order=order)

    @classmethod
    def monte_carlo(cls, n_samples: int, seed: int = 0):
        return cls("monte-carlo", n_samples=n_samples, seed=seed)

    def __post_init__(self):
        if self.kind not in ("closed-form", "gauss-hermite", "monte-carlo"):
            raise ValueError(f"unknown scheme {self.kind!r}")


@dataclass(frozen=True)
class Estimate:
    """Value with a standard error (zero for deterministic schemes) and a deterministic error bound."""

    value: float
    standard_error: float = 0.0
    error_bound: float = 0.0

    def __float__(self):
        return float(self.value)


def _gaussian_samples(model, t, x, k, n, seed, antithetic=False):
    mean, _ = model.gaussian_law(t, x, k)
    dim = model.state_dim
    half = (n + 1) // 2 if antithetic else n
    xi = stream(seed, 0).standard_normal((half, dim))
    if antithetic:
        xi = np.concatenate([xi, -xi])[:n]
    if isinstance(model, LinearModel):
        root = model._blocks(t)[3]
        return mean + xi @ root.T, xi
    return mean + np.sqrt(model.covariance(t)) * xi, xi


def _gh_rule(order):
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    return nodes, weights / np.sqrt(2.0 * np.pi)


def semigroup_estimate(model, k_drift, f, t: float, x, scheme: Scheme = Scheme()) -> Estimate:
    """``P_t^{(k)} f(x)`` with a standard error for Monte-Carlo schemes."""
    if t < 0:
        raise ValueError("semigroup time must be nonnegative")
    x = np.asarray(x, dtype=float)
    if t == 0:
        return Estimate(float(f(x)))
    is_cyl = isinstance(f, CylinderFunction)
    if scheme.kind == "closed-form":
        if not is_cyl:
            raise ValueError("closed-form scheme needs a cylinder function")
        return Estimate(float(f.propagate(model, t, k_drift)(x)))
    if scheme.kind == "gauss-hermite":
        nodes, weights = _gh_rule(scheme.order)
        if is_cyl:
            a = f.padded_direction(model.state_dim)
            offset, variance, new_dir = ridge_law(model, a, t, k_drift)
            s = x @ new_dir + offset + np.sqrt(variance) * nodes
            return Estimate(float(weights @ f.profile(s)))
        modes = getattr(f, "modes", None)
        if modes is None:
            raise ValueError("Gauss-Hermite needs a cylinder function or a field with finite mode support")
        mean, cov = model.gaussian_law(t, x, k_drift)
        grids = np.meshgrid(*[nodes] * len(modes), indexing="ij")
        pts = np.broadcast_to(mean, grids[0].shape + (mean.size,)).copy()
        for j, mode in enumerate(modes):
            pts[..., mode] = mean[mode] + np.sqrt(cov[mode]) * grids[j]
        w_tensor = np.ones(grids[0].shape)
        for j in range(len(modes)):
            shape = [1] * len(modes)
            shape[j] = nodes.size
            w_tensor = w_tensor * weights.reshape(shape)
        vals = np.asarray(f(pts.reshape(-1, mean.size))).reshape(w_tensor.shape)
        return Estimate(float(np.sum(w_tensor * vals)))
    X, _ = _gaussian_samples(model, t, x, k_drift, scheme.n_samples, scheme.seed)
    vals = np.asarray(f(X), dtype=float)
    se = float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else np.inf
    return Estimate(float(vals.mean()), se)


def apply_semigroup(model, k_drift, f, t: float, x, scheme: Scheme = Scheme()) -> float:
    """``P_t^{(k)}[f](x) = E f(X^{(k)}(t; x))``."""
    return semigroup_estimate(model, k_drift, f, t, x, scheme).value


def apply_generator(model, k_drift, f: CylinderFunction, x):
    """Generator of the controlled OU semigroup on a cylinder function.

    ``1/2 <Q a, a> h'' + h' <A x, a> + h' <G* a, k>``; vectorised over leading axes of ``x``.
    """
    if not isinstance(f, CylinderFunction):
        raise TypeError("the generator is applied exactly to cylinder functions only")
    x = np.asarray(x, dtype=float)
    a = f.padded_direction(model.state_dim)
    s = f.ridge(x)
    d1, d2 = f.profile(s, 1), f.profile(s, 2)
    out = 0.5 * model.noise_quad(a) * d2 + d1 * (model.drift(x) @ a)
    if k_drift is not None:
        out = out + d1 * (np.asarray(k_drift, dtype=float) @ model.g_adjoint(a))
    return out


def laplace_panels(lam: float, rate_max: float, t_max: float, n_panels: int = 48, order: int = 16):
    """Gauss-Legendre nodes and weights on geometrically graded panels of ``[0, t_max]``."""
    first = 1e-3 * min(1.0 / lam, 1.0 / max(rate_max, 1e-12), t_max)
    edges = np.concatenate([[0.0], np.geomspace(first, t_max, n_panels)])
    x, w = np.polynomial.legendre.leggauss(order)
    a, b = edges[:-1, None], edges[1:, None]
    nodes = (0.5 * (b - a) * x + 0.5 * (a + b)).ravel()
    weights = (0.5 * (b - a) * w).ravel()
    return nodes, weights


def _resolvent_horizon(model, lam, sup_norm, tol):
    rates = model.mu[model.mu > 0] if isinstance(model, SpectralModel) else np.empty(0)
    t_max = max(10.0 / lam, 10.0 / rates.min() if rates.size else 0.0)
    if sup_norm > 0:
        t_max = max(t_max, np.log(sup_norm / (lam * tol)) / lam)
    return t_max


def resolvent(model, lam: float, g, x, k_drift=None, scheme: Scheme = Scheme(), tol: float = 1e-10,
              n_panels: int = 48, order: int = 16) -> Estimate:
    """Laplace transform ``int_0^inf e^{-lam s} P_s g(x) ds`` on a truncated, graded quadrature.

    The truncation tail ``sup|g| e^{-lam T}/lam`` is returned as the error bound.
    """
    if not lam > 0:
        raise ValueError("resolvent needs lambda > 0")
    sup = g.sup_norm if isinstance(g, CylinderFunction) else float(getattr(g, "sup_norm", np.inf))
    if not np.isfinite(sup):
        raise ValueError("resolvent needs a bounded integrand")
    t_max = _resolvent_horizon(model, lam, sup, tol)
    rate_max = float(np.max(model.mu)) if isinstance(model, SpectralModel) else 1.0
    nodes, weights = laplace_panels(lam, rate_max, t_max, n_panels, order)
    vals = np.empty(nodes.size)
    ses = np.zeros(nodes.size)
    for i, s in enumerate(nodes):
        est = semigroup_estimate(model, k_drift, g, s, x, scheme)
        vals[i], ses[i] = est.value, est.standard_error
    disc = weights * np.exp(-lam * nodes)
    value = float(disc @ vals)
    se = float(np.sqrt(np.sum((disc * ses) ** 2)))
    return Estimate(value, se, sup * np.exp(-lam * t_max) / lam)


def _smoothing_ok(model) -> bool:
    cached = getattr(model, "_smoothing_verdict", None)
    if cached is None:
        try:
            cached = check_smoothing(model).satisfied
        except ValueError:
            cached = False
        object.__setattr__(model, "_smoothing_verdict", cached)
    return cached


def g_gradient_semigroup(model: SpectralModel, f, t: float, x, n_samples: int, seed: int,
                         k_drift=None, check: bool = True):
    """Monte-Carlo G-gradient of ``P_t f`` by Gaussian integration by parts.

    Component ``j`` averages ``f(X) e^{-mu_j t} g_j (X_j - m_j) / Q_t(j)`` over antithetic pairs.
    Returns ``(estimate, standard_error)`` as arrays over modes.
    """
    if t <= 0:
        raise ValueError("smoothing representation undefined at t=0")
    if not isinstance(model, SpectralModel):
        raise TypeError("the integration-by-parts weight is implemented for diagonal models")
    if check and not _smoothing_ok(model):
        raise ValueError("model failed check_smoothing; the G-gradient representation is not available")
    x = np.asarray(x, dtype=float)
    mean, cov = model.gaussian_law(t, x, k_drift)
    std = np.sqrt(cov)
    half = max(1, n_samples // 2)
    xi = stream(seed, 1).standard_normal((half, model.n_modes))
    fp = np.asarray(f(mean + std * xi), dtype=float)
    fm = np.asarray(f(mean - std * xi), dtype=float)
    # weight (X - m)/Q = xi/std, scaled by e^{-mu t} g
    w = model.decay(t) * model.g_diag / std
    samples = 0.5 * (fp - fm)[:, None] * xi * w
    est = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(half) if half > 1 else np.full(model.n_modes, np.inf)
    return est, se


def g_gradient_closed_form(model, f: CylinderFunction, t: float, x, k_drift=None):
    """Exact ``D^G P_t f(x)`` for a cylinder, by differentiating the propagated cylinder."""
    return f.propagate(model, t, k_drift).g_gradient(model, np.asarray(x, dtype=float))


def semigroup_property_audit(model, f, s: float, t: float, x, scheme: Scheme = Scheme(), k_drift=None) -> Estimate:
    """``|P_{s+t} f(x) - P_s[P_t f](x)|``; Monte-Carlo schemes also report the combined SE."""
    if s < 0 or t < 0:
        raise ValueError("times must be nonnegative")
    x = np.asarray(x, dtype=float)
    if s == 0 or t == 0:
        return Estimate(0.0)
    if scheme.kind == "closed-form":
        direct = f.propagate(model, s + t, k_drift)(x)
        composed = f.propagate(model, t, k_drift).propagate(model, s, k_drift)(x)
        return Estimate(float(abs(direct - composed)))
    if scheme.kind == "gauss-hermite":
        direct = semigroup_estimate(model, k_drift, f, s + t, x, scheme).value
        inner = f.propagate(model, t, k_drift)
        composed = semigroup_estimate(model, k_drift, inner, s, x, scheme).value
        return Estimate(float(abs(direct - composed)))
    n = scheme.n_samples
    direct = semigroup_estimate(model, k_drift, f, s + t, x, Scheme.monte_carlo(n, scheme.seed))
    # nested: draw X_s, then one transition over t from each sample with an independent stream
    Xs, _ = _gaussian_samples(model, s, x, k_drift, n, scheme.seed + 1)
    mean_t = np.array([model.gaussian_law(t, row, k_drift)[0] for row in Xs]) \
        if isinstance(model, LinearModel) else model.decay(t) * Xs + model.gaussian_law(t, np.zeros(model.state_dim), k_drift)[0]
    xi = stream(scheme.seed + 2, 0).standard_normal(Xs.shape)
    if isinstance(model, LinearModel):
        Xt = mean_t + xi @ model._blocks(t)[3].T
    else:
        Xt = mean_t + np.sqrt(model.covariance(t)) * xi
    vals = np.asarray(f(Xt), dtype=float)
    se2 = vals.std(ddof=1) / np.sqrt(n)
    return Estimate(float(abs(direct.value - vals.mean())), float(np.hypot(direct.standard_error, se2)))
