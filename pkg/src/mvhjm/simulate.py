"""Path simulation for the affine, Black-Scholes type and discrete-maturity
models, plus a statistical test of the HJM drift condition.

Atoms move deterministically, x -> (x - t)^+, so in a batch of paths the atom
locations are shared and only the weights are random.  Batches store weights
as ``(n_paths, n_times, n_atoms)`` arrays.

Random streams: paths are generated in blocks of ``BLOCK`` paths, block ``b``
drawing from ``Philox(SeedSequence(seed, spawn_key=(b,)))``.  Each block always
draws a full block and truncates, so path ``i`` depends only on
``(seed, i)`` and adding paths never changes existing ones.
"""
from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .contracts import FutureContract
from .errors import DomainError, ValidationError
from .measures import DiscreteMeasure, TestFunction, pair
from .models import AlphaFunction, BSKernels, DiscreteHJMConfig, alpha_eval, build_beta_matrix

BLOCK = 4096
POISSON_MAX = 1e15


def block_generator(seed: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(block),))
    return np.random.Generator(np.random.Philox(ss))


def run_blocks(fn: Callable[[np.random.Generator, int], np.ndarray], n_paths: int, seed: int,
               threads: int | None = None) -> np.ndarray:
    """Concatenate ``fn(rng, BLOCK)`` over blocks and keep the first n_paths rows."""
    n_blocks = -(-int(n_paths) // BLOCK)
    threads = threads or os.cpu_count() or 1

    def one(b):
        return fn(block_generator(seed, b), BLOCK)

    if threads > 1 and n_blocks > 1:
        with ThreadPoolExecutor(threads) as ex:
            parts = list(ex.map(one, range(n_blocks)))
    else:
        parts = [one(b) for b in range(n_blocks)]
    return np.concatenate(parts, axis=0)[:n_paths]


def feller_branching(w, theta, rng: np.random.Generator, size=None):
    """Exact zero-drift branching transition.

    Given mass ``w`` and accumulated rate ``theta``, returns
    ``Gamma(N, theta / 2)`` with ``N ~ Poisson(2 w / theta)``; this has
    Laplace transform ``exp(w u / (1 - u theta / 2))``, mean ``w`` and
    variance ``w * theta``.  ``theta == 0`` or ``w == 0`` leaves ``w`` unchanged.
    """
    w = np.asarray(w, dtype=float)
    theta = np.asarray(theta, dtype=float)
    shape = np.broadcast_shapes(w.shape, theta.shape) if size is None else size
    w_b = np.broadcast_to(w, shape)
    th_b = np.broadcast_to(theta, shape)
    active = (th_b > 0) & (w_b > 0)
    out = np.array(w_b, dtype=float, copy=True)
    if np.any(active):
        lam = 2.0 * w_b[active] / th_b[active]
        # numpy's Poisson sampler overflows near 1e19; far below that the
        # Poisson law is Gaussian to double precision
        big = lam > POISSON_MAX
        n = np.empty(lam.shape)
        n[~big] = rng.poisson(lam[~big])
        n[big] = np.round(lam[big] + np.sqrt(lam[big]) * rng.standard_normal(int(big.sum())))
        out[active] = rng.standard_gamma(n.astype(float)) * (0.5 * th_b[active])
    return out


@dataclass(frozen=True)
class PathGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 1 or t[0] != 0.0 or np.any(np.diff(t) <= 0):
            raise ValidationError("grid times must start at 0 and be strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, t_end: float, n_steps: int) -> "PathGrid":
        return cls(np.linspace(0.0, t_end, n_steps + 1))

    def check(self, horizon: float) -> None:
        if self.times[-1] > horizon + 1e-12:
            raise DomainError(f"grid ends at {self.times[-1]} beyond horizon {horizon}")


@dataclass(frozen=True)
class MeasurePath:
    grid: PathGrid
    states: list

    def __post_init__(self):
        if len(self.states) != self.grid.times.size:
            raise ValidationError("one state per grid time required")


@dataclass
class PathBatch:
    """Many paths sharing atom locations.

    ``positions[k]`` are the atom locations at ``grid.times[k]`` and
    ``weights[p, k]`` the weights of path ``p`` there.
    """

    grid: PathGrid
    positions: np.ndarray
    weights: np.ndarray
    horizon: float

    @property
    def n_paths(self) -> int:
        return self.weights.shape[0]

    def path(self, i: int) -> MeasurePath:
        states = [
            DiscreteMeasure(self.positions[k], self.weights[i, k], self.horizon).normalize()
            for k in range(self.grid.times.size)
        ]
        return MeasurePath(self.grid, states)

    def paths(self) -> list:
        return [self.path(i) for i in range(self.n_paths)]

    def pair(self, phi: Callable) -> np.ndarray:
        """<phi, mu_t> for every path and time, shape (n_paths, n_times)."""
        vals = np.stack([np.asarray(phi(p), dtype=float) * np.ones_like(p) for p in self.positions])
        return np.einsum("pka,ka->pk", self.weights, vals)

    def total_mass(self) -> np.ndarray:
        return self.weights.sum(axis=2)

    def mass_at_zero(self) -> np.ndarray:
        return np.einsum("pka,ka->pk", self.weights, (self.positions == 0.0).astype(float))


# --- affine model ------------------------------------------------------------


def exact_affine_step(mu: DiscreteMeasure, dt: float, a: AlphaFunction, rng: np.random.Generator) -> DiscreteMeasure:
    """One exact transition of the affine model over ``dt``.

    Each atom moves to ``(x - dt)^+`` and its weight follows the Feller
    branching law with ``theta = int_0^dt alpha((x - s)^+) ds``.
    """
    if not dt > 0:
        raise DomainError("dt must be positive")
    theta = a.transported_integral(mu.x, dt)
    w = feller_branching(mu.w, theta, rng)
    return DiscreteMeasure(np.maximum(mu.x - dt, 0.0), w, mu.horizon).normalize()


def simulate_affine_path(mu0: DiscreteMeasure, grid: PathGrid, a: AlphaFunction,
                         rng: np.random.Generator) -> MeasurePath:
    grid.check(mu0.horizon)
    states = [mu0.normalize()]
    for dt in np.diff(grid.times):
        states.append(exact_affine_step(states[-1], dt, a, rng))
    return MeasurePath(grid, states)


def _affine_positions_thetas(mu0, grid, a):
    pos = [mu0.x]
    thetas = []
    for dt in np.diff(grid.times):
        thetas.append(a.transported_integral(pos[-1], dt))
        pos.append(np.maximum(pos[-1] - dt, 0.0))
    return np.stack(pos), thetas


def simulate_affine_paths(mu0: DiscreteMeasure, grid: PathGrid, a: AlphaFunction, n_paths: int,
                          seed: int = 0, threads: int | None = None) -> PathBatch:
    """Batch of exact affine paths on a shared grid."""
    grid.check(mu0.horizon)
    positions, thetas = _affine_positions_thetas(mu0, grid, a)
    n_atoms = mu0.x.size

    def block(rng, size):
        out = np.empty((size, grid.times.size, n_atoms))
        out[:, 0] = mu0.w
        for k, th in enumerate(thetas):
            out[:, k + 1] = feller_branching(out[:, k], th[None, :], rng)
        return out

    return PathBatch(grid, positions, run_blocks(block, n_paths, seed, threads), mu0.horizon)


def affine_future_samples(mu0: DiscreteMeasure, c: FutureContract, tau: float, a: AlphaFunction,
                          n_paths: int, seed: int = 0, threads: int | None = None) -> np.ndarray:
    """Exact samples of F(tau, tau1, tau2) under the affine model.

    Only atoms that end up in the delivery period matter and atoms branch
    independently, so the others are not simulated.
    """
    wx = c.payoff_weights(mu0.x)
    inside = wx != 0
    x, w, wx = mu0.x[inside], mu0.w[inside], wx[inside]
    theta = a.transported_integral(x, tau)

    def block(rng, size):
        return feller_branching(w[None, :], theta[None, :], rng, size=(size, x.size)) @ wx

    return run_blocks(block, n_paths, seed, threads)


# --- Black-Scholes type model (pi = 0) ---------------------------------------


def _bs_factor(x, dt, k: BSKernels):
    X, Y = np.meshgrid(x, x, indexing="ij")
    if np.any(k.pi_at(X, Y) != 0):
        raise ValidationError("log-Euler scheme requires pi == 0")
    cov = k.beta_at(X, Y) * dt
    cov = 0.5 * (cov + cov.T)
    lam, V = np.linalg.eigh(cov)
    scale = max(1.0, float(np.max(np.abs(lam), initial=0.0)))
    if np.any(lam < -1e-12 * scale):
        warnings.warn(f"covariance not PSD (min eigenvalue {lam.min():.3g}); clipping at 0", RuntimeWarning,
                      stacklevel=3)
    lam = np.clip(lam, 0.0, None)
    return V * np.sqrt(lam), np.diag(cov)


def logeuler_bs_step(mu: DiscreteMeasure, dt: float, k: BSKernels, rng: np.random.Generator) -> DiscreteMeasure:
    """Log-normal weight update with covariance beta(x_i, x_j) dt, then transport."""
    if not dt > 0:
        raise DomainError("dt must be positive")
    if len(mu) == 0:
        return mu
    L, var = _bs_factor(mu.x, dt, k)
    z = L @ rng.standard_normal(mu.x.size)
    w = mu.w * np.exp(z - 0.5 * var)
    return DiscreteMeasure(np.maximum(mu.x - dt, 0.0), w, mu.horizon).normalize()


def simulate_bs_paths(mu0: DiscreteMeasure, grid: PathGrid, k: BSKernels, n_paths: int, seed: int = 0,
                      threads: int | None = None) -> PathBatch:
    grid.check(mu0.horizon)
    pos = [mu0.x]
    factors = []
    for dt in np.diff(grid.times):
        factors.append(_bs_factor(pos[-1], dt, k))
        pos.append(np.maximum(pos[-1] - dt, 0.0))
    n_atoms = mu0.x.size

    def block(rng, size):
        out = np.empty((size, grid.times.size, n_atoms))
        out[:, 0] = mu0.w
        for j, (L, var) in enumerate(factors):
            z = rng.standard_normal((size, n_atoms)) @ L.T
            out[:, j + 1] = out[:, j] * np.exp(z - 0.5 * var)
        return out

    return PathBatch(grid, np.stack(pos), run_blocks(block, n_paths, seed, threads), mu0.horizon)


# --- discrete maturities -----------------------------------------------------


def _discrete_thetas(cfg, a):
    T = int(cfg.T)
    if callable(a) and not isinstance(a, AlphaFunction):
        return np.array([float(a(i + 1)) for i in range(T)])
    return np.asarray(alpha_eval(a, np.arange(1, T + 1, dtype=float)), dtype=float)


def discrete_hjm_step(mu, cfg: DiscreteHJMConfig, thetas, rng, beta=None):
    beta = build_beta_matrix(cfg) if beta is None else beta
    mu = np.asarray(mu, dtype=float)
    nu = mu @ (np.eye(beta.shape[0]) + beta).T
    nu = np.maximum(nu, 0.0)  # only removes -0.0 / rounding; (I + beta) is non-negative for gamma <= 1
    out = nu.copy()
    out[..., :-1] = feller_branching(nu[..., :-1], thetas, rng)
    return out


def discrete_hjm_path(mu0_vec, steps: int, cfg: DiscreteHJMConfig, a, rng: np.random.Generator) -> list:
    """One path of the discrete-maturity model on E = {0, ..., T}.

    Each step applies the drift ``nu = (I + beta) mu`` and then an exact
    branching draw with rate ``alpha(i + 1)`` on nodes ``0..T-1``, so
    conditional means equal ``nu``.
    """
    mu0 = np.asarray(mu0_vec, dtype=float)
    if mu0.size != cfg.T + 1 or np.any(mu0 < 0):
        raise ValidationError(f"mu0 must be non-negative with length T+1={cfg.T + 1}")
    if not (0 <= steps <= cfg.T):
        raise ValidationError("steps must lie in [0, T]")
    thetas = _discrete_thetas(cfg, a)
    beta = build_beta_matrix(cfg)
    out = [mu0]
    for _ in range(steps):
        out.append(discrete_hjm_step(out[-1], cfg, thetas, rng, beta))
    return out


def discrete_hjm_paths(mu0_vec, steps: int, cfg: DiscreteHJMConfig, a, n_paths: int, seed: int = 0,
                       threads: int | None = None) -> np.ndarray:
    """Batch version; shape (n_paths, steps + 1, T + 1)."""
    mu0 = np.asarray(mu0_vec, dtype=float)
    if mu0.size != cfg.T + 1 or np.any(mu0 < 0):
        raise ValidationError(f"mu0 must be non-negative with length T+1={cfg.T + 1}")
    if not (0 <= steps <= cfg.T):
        raise ValidationError("steps must lie in [0, T]")
    thetas = _discrete_thetas(cfg, a)
    beta = build_beta_matrix(cfg)

    def block(rng, size):
        out = np.empty((size, steps + 1, mu0.size))
        out[:, 0] = mu0
        for j in range(steps):
            out[:, j + 1] = discrete_hjm_step(out[:, j], cfg, thetas[None, :], rng, beta)
        return out

    return run_blocks(block, n_paths, seed, threads)


def discrete_drift_statistic(paths: np.ndarray, phi: Callable, gamma: float = 0.0):
    """Mean and standard error over paths of
    ``<phi, mu_t> + sum_{j<=t} (<phi', mu_{j-1}> + gamma phi(0) mu_{j-1}(0))``
    with ``phi'(i) = (phi(i) - phi(i-1)) 1_{i>0}``.
    """
    paths = np.asarray(paths, dtype=float)
    i = np.arange(paths.shape[-1], dtype=float)
    ph = np.asarray(phi(i), dtype=float)
    dph = np.concatenate([[0.0], np.diff(ph)])
    level = paths @ ph
    comp = paths @ dph + gamma * ph[0] * paths[..., 0]
    stat = level.copy()
    stat[:, 1:] += np.cumsum(comp[:, :-1], axis=1)
    n = stat.shape[0]
    return stat.mean(axis=0), stat.std(axis=0, ddof=1) / np.sqrt(n)


# --- drift-condition test ----------------------------------------------------


@dataclass
class DriftTestReport:
    max_abs_z: float
    passed: bool
    z: list
    mean_increment: list
    bias_tolerance: list
    n_paths: int
    threshold: float = 4.0
    warnings: list = field(default_factory=list)

    def to_dict(self):
        return {
            "pass": self.passed,
            "max_abs_z": self.max_abs_z,
            "threshold": self.threshold,
            "n_paths": self.n_paths,
            "z": self.z,
            "mean_increment": self.mean_increment,
            "bias_tolerance": self.bias_tolerance,
            "warnings": self.warnings,
        }


def _second_derivative_bound(phi: TestFunction, horizon: float) -> float:
    g = np.linspace(0.0, horizon, 2001)
    d = np.asarray(phi.derivative(g), dtype=float)
    return float(np.max(np.abs(np.diff(d))) / (g[1] - g[0]))


def _drift_report(times, level, comp, mass, phi, horizon, threshold):
    # level, comp, mass: (n_paths, n_times)
    dt = np.diff(times)
    integral = 0.5 * (comp[:, 1:] + comp[:, :-1]) * dt
    inc = level[:, 1:] - level[:, :-1] + integral
    n = inc.shape[0]
    mean = inc.mean(axis=0)
    se = inc.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(mean)
    # Trapezoid error of the compensator; phi'((x - s)^+) has a slope kink where
    # an atom reaches 0, so the bound scales with sup|phi''| * mass * dt^2.
    bias_tol = _second_derivative_bound(phi, horizon) * mass.mean(axis=0)[:-1] * dt ** 2 / 8.0
    denom = np.sqrt(se ** 2 + bias_tol ** 2)
    z = np.where(denom > 0, mean / np.where(denom > 0, denom, 1.0), np.where(np.abs(mean) > 1e-14, np.inf, 0.0))
    warn = []
    if np.max(dt) > 1e-2 * horizon * (1.0 + 1e-9):
        warn.append(f"grid spacing {np.max(dt):.3g} exceeds 1e-2 * T; quadrature bias may dominate")
        warnings.warn(warn[-1], RuntimeWarning, stacklevel=3)
    max_z = float(np.max(np.abs(z))) if z.size else 0.0
    return DriftTestReport(max_z, bool(max_z < threshold), z.tolist(), mean.tolist(), bias_tol.tolist(), n,
                           threshold, warn)


def martingale_drift_test(paths: Sequence[MeasurePath], phi: TestFunction, gamma: float = 0.0,
                          threshold: float = 4.0) -> DriftTestReport:
    """z-test that ``<phi, mu_t> + int_0^t (<phi', mu_s> + gamma phi(0) mu_s({0})) ds``
    has zero-mean increments on every grid interval.
    """
    phi.require_d1()
    if not paths:
        raise ValidationError("no paths")
    times = paths[0].grid.times
    for p in paths:
        if p.grid.times.shape != times.shape or np.any(p.grid.times != times):
            raise ValidationError("paths must share a grid")
    phi0 = float(phi(np.array([0.0]))[0])
    level = np.array([[pair(phi, s) for s in p.states] for p in paths])
    comp = np.array([[pair(phi.derivative, s) + gamma * phi0 * s.mass_at_zero() for s in p.states] for p in paths])
    mass = np.array([[float(s.w.sum()) for s in p.states] for p in paths])
    return _drift_report(times, level, comp, mass, phi, paths[0].states[0].horizon, threshold)


def martingale_drift_test_batch(batch: PathBatch, phi: TestFunction, gamma: float = 0.0,
                                threshold: float = 4.0) -> DriftTestReport:
    """Same statistic as :func:`martingale_drift_test` on a :class:`PathBatch`."""
    phi.require_d1()
    phi0 = float(phi(np.array([0.0]))[0])
    level = batch.pair(phi)
    comp = batch.pair(phi.derivative) + gamma * phi0 * batch.mass_at_zero()
    return _drift_report(batch.grid.times, level, comp, batch.total_mass(), phi, batch.horizon, threshold)
