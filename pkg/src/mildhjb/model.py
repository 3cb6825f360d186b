"""Problem instances as diagonal spectral data, plus numeric audits of the standing assumptions.

A :class:`SpectralModel` describes the controlled Ornstein-Uhlenbeck system

    dX = (A X + G L u) dt + sigma dW

truncated to ``N`` modes, where ``A = -diag(mu)``, ``G = diag(g)``, ``sigma = diag(sigma)``
and ``L`` is a dense ``N x m`` matrix.  :class:`LinearModel` is the dense counterpart used for
state spaces that are not diagonalised (the delay example).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.special import zeta

__all__ = [
    "ConditionReport",
    "Interval",
    "SpectralModel",
    "LinearModel",
    "build_model",
    "relaxation_integral",
    "kernel_envelope",
    "tightest_kernel_constant",
    "check_noise_trace",
    "check_smoothing",
    "theta_window",
    "gamma_norm",
    "check_commutation",
    "van_loan_integral",
    "DEFAULT_KERNEL_GRID",
]

# t-grid on which the kernel bound |e^{-mu t} g| <= C (t^-beta v 1) e^{a t} is sampled
DEFAULT_KERNEL_GRID = np.logspace(-6, 2, 401)

_SERIES_CUTOFF = 1e-8


def relaxation_integral(rate, t):
    """Return ``int_0^t exp(-rate*s) ds`` elementwise, i.e. ``(1 - exp(-rate t)) / rate``.

    Below ``|rate*t| < 1e-8`` a two-term series is used, which gives the zero-rate
    limit ``t`` without cancellation.
    """
    rate = np.asarray(rate, dtype=float)
    t = np.asarray(t, dtype=float)
    rate, t = np.broadcast_arrays(rate, t)
    z = rate * t
    small = np.abs(z) < _SERIES_CUTOFF
    safe_rate = np.where(small, 1.0, rate)
    out = np.where(small, t * (1.0 - 0.5 * z), -np.expm1(-z) / safe_rate)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class Interval:
    """Open interval ``(lower, upper)``; empty when ``lower >= upper``."""

    lower: float
    upper: float

    @property
    def empty(self) -> bool:
        return not self.lower < self.upper

    def __contains__(self, value) -> bool:
        return (not self.empty) and self.lower < value < self.upper

    def __repr__(self) -> str:
        if self.empty:
            return f"Interval(empty: {self.lower:g} >= {self.upper:g})"
        return f"Interval({self.lower:g}, {self.upper:g})"


@dataclass(frozen=True)
class ConditionReport:
    """Verdict of one numeric assumption audit.

    ``witness`` is the number that decides the verdict (a series exponent, a fitted
    power, a residual or a constant); it is finite whenever ``satisfied`` is true.
    """

    condition_id: str
    satisfied: bool
    witness: float
    detail: str = ""

    VALID_IDS = ("H1", "H2", "A1", "A2", "A3", "esg", "commutation")

    def __post_init__(self):
        if self.condition_id not in self.VALID_IDS:
            raise ValueError(f"unknown condition id {self.condition_id!r}")
        if self.satisfied and not np.isfinite(self.witness):
            raise ValueError("a satisfied condition needs a finite witness")

    def to_row(self) -> dict:
        return {
            "condition_id": self.condition_id,
            "satisfied": bool(self.satisfied),
            "witness": float(self.witness),
            "detail": self.detail,
        }


def kernel_envelope(mu, g, t):
    """``max_k exp(-mu_k t) |g_k|`` for each entry of ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    mu = np.asarray(mu, dtype=float)
    g = np.abs(np.asarray(g, dtype=float))
    with np.errstate(under="ignore"):
        return np.max(np.exp(-np.outer(t, mu)) * g, axis=1)


def _kernel_profile(t, beta, a_G):
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.maximum(t ** (-beta), 1.0) * np.exp(a_G * t)


def tightest_kernel_constant(mu, g, beta, a_G, t_grid=None) -> float:
    """Smallest ``C`` with ``max_k e^{-mu_k t}|g_k| <= C (t^-beta v 1) e^{a_G t}`` on ``t_grid``."""
    t_grid = DEFAULT_KERNEL_GRID if t_grid is None else np.asarray(t_grid, dtype=float)
    return float(np.max(kernel_envelope(mu, g, t_grid) / _kernel_profile(t_grid, beta, a_G)))


@dataclass(frozen=True, eq=False)
class SpectralModel:
    """Diagonal truncation of the controlled OU problem.

    Use :func:`build_model` to construct one; the constructor validates all invariants.
    Arrays are stored read-only so instances can be shared between threads.
    """

    mu: np.ndarray
    sigma_diag: np.ndarray
    g_diag: np.ndarray
    control_map: np.ndarray
    beta: float
    a_G: float
    C_G: float
    lam: float
    p: float
    spatial_dim: int = 1
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("mu", "sigma_diag", "g_diag"):
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        L = np.array(self.control_map, dtype=float)
        if L.ndim == 1:
            L = L.reshape(-1, 1)
        L.setflags(write=False)
        object.__setattr__(self, "control_map", L)
        n = self.mu.size
        if n < 1:
            raise ValueError("a model needs at least one mode")
        if self.sigma_diag.size != n or self.g_diag.size != n or L.shape[0] != n:
            raise ValueError(
                f"dimension mismatch: mu has {n} modes, sigma_diag {self.sigma_diag.size}, "
                f"g_diag {self.g_diag.size}, control_map rows {L.shape[0]}"
            )
        if not np.all(np.isfinite(self.mu)) or np.any(self.mu < 0):
            raise ValueError("eigenvalues mu must be finite and nonnegative")
        if np.any(np.diff(self.mu) < 0):
            raise ValueError("eigenvalues mu must be sorted nondecreasing")
        if np.any(self.sigma_diag < 0):
            raise ValueError("noise coefficients must be nonnegative")
        if not self.lam > 0:
            raise ValueError("discount rate lambda must be positive")
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("kernel exponent beta must lie in [0, 1)")
        if not self.C_G > 0:
            raise ValueError("kernel constant C_G must be positive")
        if not self.p > 1.0 / (1.0 - self.beta):
            raise ValueError(
                f"admissibility exponent violates p > 1/(1-beta): p={self.p}, "
                f"1/(1-beta)={1.0 / (1.0 - self.beta):.6g}"
            )
        if self.spatial_dim < 1:
            raise ValueError("spatial_dim must be a positive integer")
        tight = tightest_kernel_constant(self.mu, self.g_diag, self.beta, self.a_G)
        if tight > self.C_G * (1 + 1e-9):
            raise ValueError(
                f"kernel bound fails: sup |e^(-mu t) g| / ((t^-beta v 1) e^(a_G t)) = {tight:.6g} "
                f"exceeds C_G = {self.C_G:.6g}"
            )

    # --- sizes -------------------------------------------------------------
    @property
    def n_modes(self) -> int:
        return self.mu.size

    @property
    def n_controls(self) -> int:
        return self.control_map.shape[1]

    @property
    def state_dim(self) -> int:
        return self.mu.size

    @property
    def gradient_dim(self) -> int:
        """Dimension of the space in which G-gradients live (one per mode)."""
        return self.mu.size

    @property
    def noise_variance(self) -> np.ndarray:
        return self.sigma_diag**2

    # --- linear maps -------------------------------------------------------
    def drift(self, x):
        return -self.mu * np.asarray(x, dtype=float)

    def noise_quad(self, a):
        """``<Q a, a>`` for direction(s) ``a`` (last axis = modes)."""
        a = np.asarray(a, dtype=float)
        return np.sum(self.noise_variance * a * a, axis=-1)

    def g_adjoint(self, y):
        """``G* y`` (last axis = modes)."""
        return self.g_diag * np.asarray(y, dtype=float)

    def control_drift(self, u):
        """``L u`` for control(s) ``u`` (last axis = controls)."""
        return np.asarray(u, dtype=float) @ self.control_map.T

    def control_adjoint(self, q):
        """``L* q`` (last axis = gradient components)."""
        return np.asarray(q, dtype=float) @ self.control_map

    def decay(self, t):
        return np.exp(-self.mu * float(t))

    def covariance(self, t):
        """Diagonal of ``Q_t``."""
        return self.noise_variance * relaxation_integral(2.0 * self.mu, float(t))

    def propagate_direction(self, a, t):
        """``e^{tA*} a``."""
        return self.decay(t) * np.asarray(a, dtype=float)

    def gaussian_law(self, t, x, k=None):
        """Mean and diagonal covariance of ``X(t; x)`` under the constant extra drift ``G k``."""
        t = float(t)
        mean = self.decay(t) * np.asarray(x, dtype=float)
        if k is not None:
            mean = mean + self.g_diag * np.asarray(k, dtype=float) * relaxation_integral(self.mu, t)
        return mean, self.covariance(t)

    def step_maps(self, dt):
        """Per-step exact transition pieces ``(decay, gain, noise_std)``.

        ``x_next = decay * x + gain * (L u) + noise_std * xi`` with ``xi`` standard normal.
        """
        dt = float(dt)
        return self.decay(dt), self.g_diag * relaxation_integral(self.mu, dt), np.sqrt(self.covariance(dt))

    def restrict(self, modes: Sequence[int]) -> "SpectralModel":
        """Sub-model on the given (sorted) mode indices."""
        idx = np.asarray(modes, dtype=int)
        return SpectralModel(
            mu=self.mu[idx], sigma_diag=self.sigma_diag[idx], g_diag=self.g_diag[idx],
            control_map=self.control_map[idx], beta=self.beta, a_G=self.a_G,
            C_G=self.C_G, lam=self.lam, p=self.p, spatial_dim=self.spatial_dim,
            labels=dict(self.labels),
        )

    def with_discount(self, lam: float) -> "SpectralModel":
        return SpectralModel(
            mu=self.mu, sigma_diag=self.sigma_diag, g_diag=self.g_diag,
            control_map=self.control_map, beta=self.beta, a_G=self.a_G, C_G=self.C_G,
            lam=float(lam), p=self.p, spatial_dim=self.spatial_dim, labels=dict(self.labels),
        )

    def to_dict(self) -> dict:
        return {
            "n_modes": int(self.n_modes),
            "mu": self.mu.tolist(),
            "sigma_diag": self.sigma_diag.tolist(),
            "g_diag": self.g_diag.tolist(),
            "control_map": self.control_map.tolist(),
            "beta": float(self.beta),
            "a_G": float(self.a_G),
            "C_G": float(self.C_G),
            "lambda": float(self.lam),
            "p": float(self.p),
            "spatial_dim": int(self.spatial_dim),
        }

    def digest(self) -> str:
        """sha256 of the canonical JSON form; used to tag every output."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def build_model(mu, sigma_diag, g_diag, control_map, beta, a_G=0.0, C_G=None, lam=1.0,
                p=None, spatial_dim=1, labels=None) -> SpectralModel:
    """Validate spectral data and return a :class:`SpectralModel`.

    ``C_G=None`` selects the tightest kernel constant on the default t-grid.  ``p=None``
    picks ``p = 2 / (1 - beta)``, comfortably inside the admissible range.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    sigma_diag = np.broadcast_to(np.asarray(sigma_diag, dtype=float), mu.shape).copy() \
        if np.ndim(sigma_diag) == 0 else np.asarray(sigma_diag, dtype=float)
    g_diag = np.broadcast_to(np.asarray(g_diag, dtype=float), mu.shape).copy() \
        if np.ndim(g_diag) == 0 else np.asarray(g_diag, dtype=float)
    if sigma_diag.size != mu.size or g_diag.size != mu.size:
        raise ValueError(
            f"dimension mismatch: mu has {mu.size} modes, sigma_diag {sigma_diag.size}, "
            f"g_diag {g_diag.size}"
        )
    if np.any(np.diff(mu) < 0):
        raise ValueError("eigenvalues mu must be sorted nondecreasing")
    if not 0.0 <= beta < 1.0:
        raise ValueError("kernel exponent beta must lie in [0, 1)")
    if p is None:
        p = 2.0 / (1.0 - beta)
    if C_G is None:
        C_G = max(tightest_kernel_constant(mu, g_diag, beta, a_G), np.finfo(float).tiny)
    return SpectralModel(
        mu=mu, sigma_diag=sigma_diag, g_diag=g_diag, control_map=control_map,
        beta=float(beta), a_G=float(a_G), C_G=float(C_G), lam=float(lam), p=float(p),
        spatial_dim=int(spatial_dim), labels=dict(labels or {}),
    )


@dataclass(frozen=True, eq=False)
class LinearModel:
    """Dense linear model ``dX = (A X + B u) dt + S dW`` on a finite-dimensional state.

    Gradients are taken along the control directions, so ``G = B`` and the control
    enters with ``L = I``.  Implements the same interface as :class:`SpectralModel`
    where the simulation and semigroup code needs it.
    """

    drift_matrix: np.ndarray
    noise_matrix: np.ndarray
    control_matrix: np.ndarray
    lam: float = 1.0
    labels: dict = field(default_factory=dict)

    def __post_init__(self):
        A = np.atleast_2d(np.array(self.drift_matrix, dtype=float))
        S = np.array(self.noise_matrix, dtype=float)
        B = np.array(self.control_matrix, dtype=float)
        n = A.shape[0]
        if A.shape != (n, n):
            raise ValueError("drift matrix must be square")
        S = S.reshape(n, -1)
        B = B.reshape(n, -1)
        for arr in (A, S, B):
            arr.setflags(write=False)
        object.__setattr__(self, "drift_matrix", A)
        object.__setattr__(self, "noise_matrix", S)
        object.__setattr__(self, "control_matrix", B)
        if not self.lam > 0:
            raise ValueError("discount rate lambda must be positive")
        object.__setattr__(self, "_cache", {})

    @property
    def state_dim(self) -> int:
        return self.drift_matrix.shape[0]

    n_modes = state_dim

    @property
    def n_controls(self) -> int:
        return self.control_matrix.shape[1]

    @property
    def gradient_dim(self) -> int:
        return self.control_matrix.shape[1]

    def drift(self, x):
        return np.asarray(x, dtype=float) @ self.drift_matrix.T

    def noise_quad(self, a):
        a = np.asarray(a, dtype=float)
        return np.sum((a @ self.noise_matrix) ** 2, axis=-1)

    def g_adjoint(self, y):
        return np.asarray(y, dtype=float) @ self.control_matrix

    def control_drift(self, u):
        # K = R^m and L = I: the control acts through G = B directly
        return np.asarray(u, dtype=float)

    def control_adjoint(self, q):
        return np.asarray(q, dtype=float)

    @property
    def g_diag(self):
        return None

    def _blocks(self, dt):
        key = round(float(dt), 15)
        if key not in self._cache:
            n = self.state_dim
            A = self.drift_matrix
            # Van Loan: expm of [[A, I], [0, 0]] carries e^{dt A} and int_0^dt e^{sA} ds
            M = np.zeros((2 * n, 2 * n))
            M[:n, :n] = A
            M[:n, n:] = np.eye(n)
            E = expm(M * dt)
            Phi, Int = E[:n, :n], E[:n, n:]
            Q = self.noise_matrix @ self.noise_matrix.T
            C = np.zeros((2 * n, 2 * n))
            C[:n, :n] = -A
            C[:n, n:] = Q
            C[n:, n:] = A.T
            F = expm(C * dt)
            cov = F[n:, n:].T @ F[:n, n:]
            cov = 0.5 * (cov + cov.T)
            w, V = np.linalg.eigh(cov)
            root = V * np.sqrt(np.clip(w, 0.0, None))
            self._cache[key] = (Phi, Int, cov, root)
        return self._cache[key]

    def covariance_matrix(self, t):
        return self._blocks(t)[2].copy()

    def covariance(self, t):
        return np.diag(self._blocks(t)[2]).copy()

    def gaussian_law(self, t, x, k=None):
        Phi, Int, cov, _ = self._blocks(t)
        mean = Phi @ np.asarray(x, dtype=float)
        if k is not None:
            mean = mean + Int @ (self.control_matrix @ np.asarray(k, dtype=float))
        return mean, np.diag(cov).copy()

    def step_maps(self, dt):
        """Exact transition ``x_next = Phi x + Gamma u + R xi`` as dense matrices."""
        Phi, Int, _, root = self._blocks(dt)
        return Phi, Int @ self.control_matrix, root

    def to_dict(self) -> dict:
        return {
            "drift_matrix": self.drift_matrix.tolist(),
            "noise_matrix": self.noise_matrix.tolist(),
            "control_matrix": self.control_matrix.tolist(),
            "lambda": float(self.lam),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# assumption audits
# --------------------------------------------------------------------------

def _mode_indices(model: SpectralModel) -> np.ndarray:
    """Spectral index ``k`` of each stored mode (the zero mode, if present, gets k=0)."""
    offset = 0 if model.mu[0] == 0.0 else 1
    return np.arange(model.n_modes, dtype=float) + offset


def _tail_fit(k, values):
    """Fit ``log values = c + s log k`` on the last half of the positive data; None if impossible."""
    mask = (k >= 1) & (values > 0)
    k, values = k[mask], values[mask]
    if k.size < 2:
        return None
    half = max(2, k.size // 2)
    k, values = k[-half:], values[-half:]
    slope, intercept = np.polyfit(np.log(k), np.log(values), 1)
    return float(slope), float(intercept)


def check_noise_trace(model: SpectralModel, gamma: float) -> ConditionReport:
    """Trace condition on the noise: convergence of ``sum_k k^{2(2 gamma-1)/d} sigma_k^2``.

    The decay rate ``sigma_k^2 ~ c k^{-2 theta}`` is fitted on the last half of the modes
    and the series beyond the truncation is summed with a Hurwitz zeta function.
    The witness is the exponent of the extrapolated series; it must be below -1.
    """
    if not 0.0 < gamma < 0.5:
        raise ValueError("gamma must lie in (0, 1/2)")
    d = model.spatial_dim
    k = _mode_indices(model)
    q = model.noise_variance
    base = 2.0 * (2.0 * gamma - 1.0) / d
    keep = k >= 1
    partial = float(np.sum(k[keep] ** base * q[keep]))
    fit = _tail_fit(k, q)
    if fit is None:
        if np.any(q[keep] > 0):
            # a single positive coefficient: assume no decay beyond it
            theta, c = 0.0, float(q[keep][q[keep] > 0][-1])
        else:
            theta, c = np.inf, 0.0
    else:
        slope, intercept = fit
        theta, c = -0.5 * slope, float(np.exp(intercept))
    exponent = base - 2.0 * theta if np.isfinite(theta) else -np.finfo(float).max
    satisfied = bool(exponent < -1.0)
    tail = c * float(zeta(-exponent, k[-1] + 1.0)) if satisfied and c > 0 else (0.0 if satisfied else np.inf)
    detail = (f"partial sum {partial:.6g} over {int(keep.sum())} modes; fitted theta={theta:.4g}; "
              f"series exponent {exponent:.4g}; extrapolated tail {tail:.4g}")
    return ConditionReport("H1", satisfied, float(exponent), detail)


def _log_envelope_terms(mu, q, g, t):
    """``log`` of ``|g| e^{-mu t} / sqrt(q * relaxation_integral(2 mu, t))``, shape (len t, len mu)."""
    t = np.asarray(t, dtype=float)[:, None]
    mu = np.asarray(mu, dtype=float)[None, :]
    z = 2.0 * mu * t
    small = z < _SERIES_CUTOFF
    # log of (1 - e^{-z})/(2 mu) computed without overflow
    with np.errstate(divide="ignore", invalid="ignore"):
        log_phi = np.where(
            small,
            np.log(t) + np.log1p(-0.5 * z),
            np.log(-np.expm1(-z)) - np.log(np.where(small, 1.0, 2.0 * mu)),
        )
    return np.log(np.abs(g))[None, :] - mu * t - 0.5 * (np.log(q)[None, :] + log_phi)


def _envelope(model: SpectralModel, t, extrapolate=True):
    """Smoothing envelope sup_k; optionally includes power-law extrapolated modes up to k=1e15."""
    mu, q, g = model.mu, model.noise_variance, model.g_diag
    nz = g != 0
    logs = _log_envelope_terms(mu[nz], q[nz], g[nz], t) if nz.any() else np.full((len(t), 1), -np.inf)
    best = np.max(logs, axis=1)
    if extrapolate:
        k = _mode_indices(model)
        fits = [_tail_fit(k, mu), _tail_fit(k, q), _tail_fit(k, np.abs(g))]
        if all(f is not None for f in fits):
            k_ext = np.logspace(np.log10(k[-1] + 1.0), 15.0, 800)
            lk = np.log(k_ext)
            mu_ext = np.exp(fits[0][1] + fits[0][0] * lk)
            q_ext = np.exp(fits[1][1] + fits[1][0] * lk)
            g_ext = np.exp(fits[2][1] + fits[2][0] * lk)
            best = np.maximum(best, np.max(_log_envelope_terms(mu_ext, q_ext, g_ext, t), axis=1))
    return np.exp(best)


def gamma_norm(model: SpectralModel, t):
    """Operator norm of ``Q_t^{-1/2} e^{tA} G`` on the truncation.

    Equals ``sup_k |g_k| e^{-mu_k t} / sqrt(Q_t(k))``; accepts scalar or array ``t``.
    """
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t_arr <= 0):
        raise ValueError("gamma_norm needs t > 0")
    nz = model.g_diag != 0
    if np.any(model.noise_variance[nz] == 0):
        raise ValueError("gamma_norm needs nondegenerate noise on every mode with g_k != 0")
    out = _envelope(model, t_arr, extrapolate=False) if nz.any() else np.zeros_like(t_arr)
    return float(out[0]) if np.ndim(t) == 0 else out


def check_smoothing(model: SpectralModel, t_fit=None, t_far=None) -> ConditionReport:
    """Smoothing condition: the envelope ``eta(t)`` must be locally integrable and bounded at infinity.

    ``eta`` is the supremum over modes of ``|g_k| e^{-mu_k t} / sqrt(Q_t(k))`` including
    power-law extrapolated modes beyond the truncation.  The decay exponent ``r`` in
    ``eta ~ t^-r`` is the larger of a least-squares fit on ``t in [1e-4, 10]`` and the
    local slope on ``t in [1e-8, 1e-6]``; the condition holds iff ``r < 1`` and ``eta``
    does not grow on ``[10, 1e3]``.
    """
    if np.any(model.sigma_diag == 0):
        raise ValueError("H2 requires nondegenerate diagonal noise")
    t_fit = np.logspace(-4, 1, 201) if t_fit is None else np.asarray(t_fit, dtype=float)
    t_far = np.logspace(1, 3, 61) if t_far is None else np.asarray(t_far, dtype=float)
    t_small = np.logspace(-8, -6, 21)

    def slope(t):
        eta = _envelope(model, t)
        return np.polyfit(np.log(t), np.log(eta), 1)[0], eta

    s_fit, eta_fit = slope(t_fit)
    s_small, _ = slope(t_small)
    eta_far = _envelope(model, t_far)
    r = max(-s_fit, -s_small)
    growth = np.polyfit(np.log(t_far), np.log(np.maximum(eta_far, 1e-300)), 1)[0]
    bounded = bool(np.all(np.isfinite(eta_far)) and growth <= 1e-6)
    satisfied = bool(r < 1.0 and bounded and np.all(np.isfinite(eta_fit)))
    detail = (f"fitted r={-s_fit:.4g} on [{t_fit[0]:.0e},{t_fit[-1]:.0e}], small-time r={-s_small:.4g}; "
              f"large-time log-slope {growth:.3g}; eta(1)={float(_envelope(model, np.array([1.0]))[0]):.4g}")
    return ConditionReport("H2", satisfied, float(r), detail)


def theta_window(spatial_dim: int) -> Interval:
    """Admissible noise-decay exponents: the open interval ``(1/2 - 1/d, 1/(2d))``."""
    d = int(spatial_dim)
    if d < 1:
        raise ValueError("spatial dimension must be a positive integer")
    return Interval(0.5 - 1.0 / d, 1.0 / (2.0 * d))


def van_loan_integral(A: np.ndarray, t: float) -> np.ndarray:
    """``int_0^t e^{sA} ds`` via the exponential of the block matrix ``[[A, I], [0, 0]]``."""
    n = A.shape[0]
    M = np.zeros((2 * n, 2 * n))
    M[:n, :n] = A
    M[:n, n:] = np.eye(n)
    return expm(M * t)[:n, n:]


def check_commutation(model: SpectralModel, n_probe: int = 16, t_grid=None, seed: int = 0) -> ConditionReport:
    """Check ``G int_0^t e^{sA} h ds = int_0^t e^{sA} G h ds`` on random probes ``h``.

    The left side uses the Van Loan block exponential, the right side composite
    Gauss-Legendre quadrature of the dense matrix exponential.
    """
    t_grid = np.array([1e-8, 1e-4, 1e-2, 0.1]) if t_grid is None else np.asarray(t_grid, dtype=float)
    rng = np.random.default_rng(seed)
    n = model.n_modes
    A = np.diag(-model.mu)
    G = np.diag(model.g_diag)
    H = rng.standard_normal((n, n_probe))
    nodes, weights = np.polynomial.legendre.leggauss(20)
    worst, scale = 0.0, 0.0
    for t in t_grid:
        lhs = G @ (van_loan_integral(A, t) @ H)
        panels = int(np.ceil(t * (model.mu[-1] + 1.0))) + 1
        edges = np.linspace(0.0, t, panels + 1)
        rhs = np.zeros_like(lhs)
        GH = G @ H
        for a, b in zip(edges[:-1], edges[1:]):
            for s, w in zip(0.5 * (b - a) * nodes + 0.5 * (a + b), 0.5 * (b - a) * weights):
                rhs += w * (expm(A * s) @ GH)
        worst = max(worst, float(np.max(np.abs(lhs - rhs))))
        scale = max(scale, float(np.max(np.abs(lhs))))
    tol = 1e-12 * max(1.0, scale)
    return ConditionReport(
        "commutation", worst <= tol, worst,
        f"max residual {worst:.3e} over {n_probe} probes and {len(t_grid)} times (tolerance {tol:.1e})",
    )
