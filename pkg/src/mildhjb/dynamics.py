"""Exact-in-law simulation of the controlled Ornstein-Uhlenbeck mild solution.

Each simulation step draws from the Gaussian transition kernel, so the only
discretisation error comes from freezing feedback controls over a step.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .model import ConditionReport, DEFAULT_KERNEL_GRID, LinearModel, SpectralModel, kernel_envelope, \
    relaxation_integral, _kernel_profile
from .rng import normals

__all__ = [
    "Box",
    "ControlProcess",
    "GaussianLaw",
    "PathEnsemble",
    "covariance_Qt",
    "controlled_mean",
    "transition_law",
    "advance",
    "simulate_blocks",
    "sample_paths",
    "approximate_by_simple",
    "kernel_bound_audit",
    "DEFAULT_BLOCK",
]

log = logging.getLogger(__name__)

DEFAULT_BLOCK = 4096


@dataclass(frozen=True)
class Box:
    """Axis-aligned box ``prod_i [lower_i, upper_i]``; infinite bounds give the full space."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        lo, hi = np.broadcast_arrays(lo, hi)
        if np.any(lo > hi):
            raise ValueError("box lower bounds exceed upper bounds")
        object.__setattr__(self, "lower", lo.copy())
        object.__setattr__(self, "upper", hi.copy())

    @classmethod
    def full(cls, dim: int) -> "Box":
        return cls(np.full(dim, -np.inf), np.full(dim, np.inf))

    @classmethod
    def symmetric(cls, dim: int, radius: float) -> "Box":
        return cls(np.full(dim, -radius), np.full(dim, radius))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def bounded(self) -> bool:
        return bool(np.all(np.isfinite(self.lower)) and np.all(np.isfinite(self.upper)))

    def contains(self, u, atol: float = 1e-12) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.all((u >= self.lower - atol) & (u <= self.upper + atol), axis=-1)

    def project(self, u) -> np.ndarray:
        return np.clip(np.asarray(u, dtype=float), self.lower, self.upper)

    def sample(self, rng: np.random.Generator, size=None, fallback_scale: float = 1.0) -> np.ndarray:
        """Uniform draw in the box; unbounded sides use a normal with ``fallback_scale``."""
        shape = (self.dim,) if size is None else (size, self.dim)
        lo = np.where(np.isfinite(self.lower), self.lower, np.nan)
        hi = np.where(np.isfinite(self.upper), self.upper, np.nan)
        uni = lo + (hi - lo) * rng.random(shape)
        gauss = fallback_scale * rng.standard_normal(shape)
        return np.where(np.isfinite(uni), uni, gauss)


@dataclass(frozen=True, eq=False)
class ControlProcess:
    """Simple (piecewise-constant, right-continuous) control or a state-feedback policy.

    For ``kind == "simple"`` the value ``values[i]`` is held on ``[jump_times[i], jump_times[i+1])``
    and the last value forever.  For ``kind == "feedback"`` the callable maps a batch of states
    ``(paths, n)`` to controls ``(paths, m)``; it is evaluated at the left end of each step.
    """

    kind: str
    jump_times: Optional[np.ndarray] = None
    values: Optional[np.ndarray] = None
    policy: Optional[Callable] = None
    box: Optional[Box] = None
    name: str = ""

    def __post_init__(self):
        if self.kind == "simple":
            times = np.atleast_1d(np.asarray(self.jump_times, dtype=float))
            if times.size and np.isinf(times[-1]):
                times = times[:-1]
            vals = np.asarray(self.values, dtype=float)
            if vals.ndim == 1:
                vals = vals.reshape(-1, 1) if vals.size == times.size else vals.reshape(1, -1)
            if times.size == 0 or times[0] != 0.0:
                raise ValueError("simple controls start with a jump time at 0")
            if np.any(np.diff(times) <= 0):
                raise ValueError("jump times must be strictly increasing")
            if vals.shape[0] != times.size:
                raise ValueError(f"{times.size} intervals but {vals.shape[0]} control values")
            if self.box is not None and not np.all(self.box.contains(vals)):
                raise ValueError("simple control values leave the admissible set")
            times.setflags(write=False)
            vals.setflags(write=False)
            object.__setattr__(self, "jump_times", times)
            object.__setattr__(self, "values", vals)
        elif self.kind == "feedback":
            if not callable(self.policy):
                raise ValueError("feedback controls need a callable policy")
        else:
            raise ValueError(f"unknown control kind {self.kind!r}")

    @classmethod
    def simple(cls, jump_times, values, box: Optional[Box] = None, name: str = "") -> "ControlProcess":
        return cls("simple", jump_times=jump_times, values=values, box=box, name=name)

    @classmethod
    def constant(cls, value, box: Optional[Box] = None, name: str = "") -> "ControlProcess":
        return cls.simple([0.0], np.atleast_1d(np.asarray(value, dtype=float))[None, :], box=box, name=name)

    @classmethod
    def feedback(cls, policy: Callable, box: Optional[Box] = None, name: str = "") -> "ControlProcess":
        return cls("feedback", policy=policy, box=box, name=name)

    @property
    def is_simple(self) -> bool:
        return self.kind == "simple"

    @property
    def n_controls(self) -> Optional[int]:
        return self.values.shape[1] if self.is_simple else (self.box.dim if self.box is not None else None)

    def value_at(self, t: float) -> np.ndarray:
        """Value of a simple control at time ``t`` (right-continuous)."""
        if not self.is_simple:
            raise TypeError("value_at is defined for simple controls only")
        i = int(np.searchsorted(self.jump_times, t, side="right")) - 1
        return self.values[max(i, 0)]

    def jumps_in(self, t0: float, t1: float) -> np.ndarray:
        """Jump times strictly inside ``(t0, t1)``."""
        if not self.is_simple:
            return np.empty(0)
        jt = self.jump_times
        return jt[(jt > t0) & (jt < t1)]

    def evaluate(self, t: float, states: np.ndarray) -> tuple[np.ndarray, bool]:
        """Controls for a batch of states at time ``t``; second value reports a projection."""
        states = np.atleast_2d(states)
        if self.is_simple:
            return np.broadcast_to(self.value_at(t), (states.shape[0], self.values.shape[1])), False
        u = np.asarray(self.policy(states), dtype=float)
        if u.ndim == 1:
            u = u.reshape(states.shape[0], -1)
        if u.shape[0] != states.shape[0] or not np.all(np.isfinite(u)):
            raise ValueError("feedback policy must return one finite control per state")
        if self.box is not None:
            inside = self.box.contains(u)
            if not np.all(inside):
                return self.box.project(u), True
        return u, False


@dataclass(frozen=True)
class GaussianLaw:
    """Gaussian marginal with diagonal covariance."""

    mean: np.ndarray
    cov_diag: np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.cov_diag) < 0):
            raise ValueError("variances must be nonnegative")


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """Sampled trajectories on ``time_grid``: ``states[path, time, mode]`` and ``controls[path, time, :]``.

    ``controls[:, i]`` is the control applied on ``[t_i, t_{i+1})``.
    """

    time_grid: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    seed: int
    block_size: int = DEFAULT_BLOCK

    def __post_init__(self):
        P, T, _ = self.states.shape
        if self.time_grid.shape != (T,) or self.controls.shape[:2] != (P, T):
            raise ValueError("inconsistent ensemble shapes")

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]


def covariance_Qt(model, t: float) -> np.ndarray:
    """Diagonal of the transition covariance ``Q_t``; zeros at ``t = 0``."""
    if t < 0:
        raise ValueError("covariance needs t >= 0")
    return model.covariance(t)


def _interval_table(control: ControlProcess):
    starts = control.jump_times
    ends = np.append(starts[1:], np.inf)
    return starts, ends, control.values


def controlled_mean(model, x, control: ControlProcess, t: float) -> np.ndarray:
    """Exact mean of ``X(t; x)`` under a simple control."""
    if t < 0:
        raise ValueError("controlled_mean needs t >= 0")
    if not control.is_simple:
        raise TypeError("controlled_mean is exact for simple controls only")
    x = np.asarray(x, dtype=float)
    starts, ends, values = _interval_table(control)
    if isinstance(model, SpectralModel):
        mu, g = model.mu, model.g_diag
        mean = np.exp(-mu * t) * x
        for a, b, u in zip(starts, ends, values):
            lo, hi = min(t, a), min(t, b)
            if hi <= lo:
                continue
            # int_lo^hi e^{-mu (t-s)} ds = e^{-mu (t-hi)} * int_0^{hi-lo} e^{-mu r} dr
            mean = mean + g * model.control_drift(u) * np.exp(-mu * (t - hi)) * relaxation_integral(mu, hi - lo)
        return mean
    # dense model: restart the exact law on each interval
    mean = x
    for a, b, u in zip(starts, ends, values):
        lo, hi = min(t, a), min(t, b)
        if hi > lo:
            mean, _ = model.gaussian_law(hi - lo, mean, u)
    return mean


def transition_law(model, x, control: ControlProcess, t: float) -> GaussianLaw:
    """Marginal law of ``X(t; x)`` under a simple control."""
    mean = controlled_mean(model, x, control, t)
    return GaussianLaw(mean, covariance_Qt(model, t))


def advance(model, x: np.ndarray, u: np.ndarray, dt: float, xi: np.ndarray) -> np.ndarray:
    """One exact transition step for a batch of states under frozen controls ``u``."""
    if dt == 0:
        return x.copy()
    if isinstance(model, LinearModel):
        Phi, Gamma, root = model.step_maps(dt)
        return x @ Phi.T + u @ Gamma.T + xi @ root.T
    decay, gain, std = model.step_maps(dt)
    return decay * x + gain * model.control_drift(u) + std * xi


def _validate_grid(time_grid) -> np.ndarray:
    grid = np.asarray(time_grid, dtype=float)
    if grid.ndim != 1 or grid.size < 1:
        raise ValueError("time grid must be a nonempty vector")
    if grid[0] != 0.0:
        raise ValueError("time grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return grid


def _simulate_block(model, x0, control, grid, n, seed, block):
    dim = model.state_dim
    m = model.n_controls
    states = np.empty((n, grid.size, dim))
    controls = np.empty((n, grid.size, m))
    x = np.broadcast_to(np.asarray(x0, dtype=float), (n, dim)).copy()
    states[:, 0] = x
    projected = False
    for i in range(grid.size - 1):
        t0, t1 = grid[i], grid[i + 1]
        u, hit = control.evaluate(t0, x)
        projected |= hit
        controls[:, i] = u
        inner = control.jumps_in(t0, t1)
        if inner.size:
            # jumps inside a step: split it exactly, drawing sub-step noise from one stream
            pts = np.concatenate(([t0], inner, [t1]))
            xi = normals(seed, (pts.size - 1, n, dim), block, i)
            for j in range(pts.size - 1):
                uj, _ = control.evaluate(pts[j], x)
                x = advance(model, x, uj, pts[j + 1] - pts[j], xi[j])
        else:
            x = advance(model, x, u, t1 - t0, normals(seed, (n, dim), block, i))
        states[:, i + 1] = x
    u, hit = control.evaluate(grid[-1], x)
    controls[:, -1] = u
    return states, controls, projected | hit


def simulate_blocks(model, x, control: ControlProcess, time_grid, n_paths: int, seed: int,
                    block_size: int = DEFAULT_BLOCK, workers: Optional[int] = None) -> Iterator:
    """Yield ``(states, controls)`` for consecutive blocks of paths, in block order.

    Block ``b`` depends only on ``(seed, b)``, so results are identical for any number of
    worker threads.  Streaming keeps memory bounded for large ensembles.
    """
    grid = _validate_grid(time_grid)
    if n_paths < 1:
        raise ValueError("n_paths must be at least 1")
    sizes = [min(block_size, n_paths - s) for s in range(0, n_paths, block_size)]

    def run(b):
        return _simulate_block(model, x, control, grid, sizes[b], seed, b)

    warned = False
    if workers and workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = pool.map(run, range(len(sizes)))
            for states, controls, projected in results:
                if projected and not warned:
                    log.warning("feedback control left the admissible box; projected onto it")
                    warned = True
                yield states, controls
    else:
        for b in range(len(sizes)):
            states, controls, projected = run(b)
            if projected and not warned:
                log.warning("feedback control left the admissible box; projected onto it")
                warned = True
            yield states, controls


def sample_paths(model, x, control: ControlProcess, time_grid, n_paths: int, seed: int,
                 block_size: int = DEFAULT_BLOCK, workers: Optional[int] = None) -> PathEnsemble:
    """Simulate ``n_paths`` exact-in-law trajectories and keep them in memory."""
    grid = _validate_grid(time_grid)
    parts = list(simulate_blocks(model, x, control, grid, n_paths, seed, block_size, workers))
    states = np.concatenate([p[0] for p in parts])
    controls = np.concatenate([p[1] for p in parts])
    return PathEnsemble(grid, states, controls, int(seed), block_size)


# --------------------------------------------------------------------------
# simple approximation of sampled controls
# --------------------------------------------------------------------------

def _abs_power_integral_linear(f0, f1, h, p):
    """Exact ``int_0^h |f0 + (f1-f0) s/h|^p ds`` for arrays of endpoint values."""
    f0 = np.asarray(f0, dtype=float)
    f1 = np.asarray(f1, dtype=float)
    out = np.zeros(np.broadcast(f0, f1, h).shape)
    h = np.broadcast_to(h, out.shape)
    same = f0 * f1 >= 0
    diff = f1 - f0
    flat = np.abs(diff) < 1e-300
    a0, a1 = np.abs(f0), np.abs(f1)
    with np.errstate(divide="ignore", invalid="ignore"):
        mono = h * (a1 ** (p + 1) - a0 ** (p + 1)) / ((p + 1) * (a1 - a0))
        # sign change: the root splits the segment into two ramps from zero
        cross = h * (a0 ** (p + 1) + a1 ** (p + 1)) / ((p + 1) * (a0 + a1))
    equal_abs = np.abs(a1 - a0) < 1e-14 * np.maximum(a0, 1e-300)
    out = np.where(same, np.where(flat | equal_abs, h * a0**p, mono), cross)
    return out


def approximate_by_simple(times, values, mesh: float, p: float = 2.0):
    """Left-endpoint simple approximation of a sampled control path.

    The input is read as the piecewise-linear interpolant of ``values`` at ``times``.  Returns
    the simple :class:`ControlProcess` holding the input's value at each mesh point and the
    ``L^p(0, T)`` distance between the two, computed exactly for scalar controls and for ``p = 2``.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size == 0:
        raise ValueError("cannot approximate an empty control path")
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != times.size:
        raise ValueError("times and values disagree in length")
    if not mesh > 0:
        raise ValueError("mesh must be positive")
    t0, T = times[0], times[-1]
    if times.size == 1 or T == t0:
        return ControlProcess.simple([0.0], values[:1]), 0.0
    n_int = int(np.ceil((T - t0) / mesh - 1e-9))
    knots = t0 + mesh * np.arange(n_int)
    held = np.stack([np.interp(knots, times, values[:, j]) for j in range(values.shape[1])], axis=1)
    control = ControlProcess.simple(knots - t0, held)
    # merged breakpoints: on each piece the error is affine
    pts = np.union1d(times, np.append(knots, T))
    pts = pts[(pts >= t0) & (pts <= T)]
    lin = np.stack([np.interp(pts, times, values[:, j]) for j in range(values.shape[1])], axis=1)
    idx = np.clip(np.searchsorted(knots, pts[:-1], side="right") - 1, 0, n_int - 1)
    e0 = lin[:-1] - held[idx]
    e1 = lin[1:] - held[idx]
    h = np.diff(pts)
    if values.shape[1] == 1:
        total = np.sum(_abs_power_integral_linear(e0[:, 0], e1[:, 0], h, p))
    elif p == 2:
        total = np.sum(h[:, None] * (e0**2 + e0 * e1 + e1**2) / 3.0)
    else:
        nodes, weights = np.polynomial.legendre.leggauss(16)
        s = 0.5 * (nodes + 1.0)
        err = e0[:, None, :] + (e1 - e0)[:, None, :] * s[None, :, None]
        total = np.sum(0.5 * h[:, None] * weights * np.linalg.norm(err, axis=2) ** p)
    return control, float(total ** (1.0 / p))


def kernel_bound_audit(model: SpectralModel, t_grid=None) -> ConditionReport:
    """Check ``max_k e^{-mu_k s}|g_k| <= C_G (s^-beta v 1) e^{a_G s}`` on ``t_grid``.

    The witness is the tightest admissible constant on the grid.
    """
    t_grid = DEFAULT_KERNEL_GRID if t_grid is None else np.asarray(t_grid, dtype=float)
    ratio = kernel_envelope(model.mu, model.g_diag, t_grid) / _kernel_profile(t_grid, model.beta, model.a_G)
    tight = float(np.max(ratio))
    ok = tight <= model.C_G * (1 + 1e-9)
    worst_t = float(t_grid[int(np.argmax(ratio))])
    return ConditionReport(
        "esg", bool(ok), tight,
        f"tightest C_G {tight:.6g} (attained near t={worst_t:.3g}) vs model C_G {model.C_G:.6g}, "
        f"beta={model.beta:g}, a_G={model.a_G:g}",
    )
