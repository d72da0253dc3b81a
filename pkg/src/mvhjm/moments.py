"""Polynomial moments through the dual operators.

Coefficients are rank one, ``g^{(x)m}``, so ``<g^{(x)m}, mu^m> = <g, mu>^m``.
Dual actions are returned in symmetrised form and evaluated at point tuples
``z`` of shape ``(n, m)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.integrate import simpson

from .contracts import FutureContract
from .errors import DegenerateControl, KernelBoundError, ShapeError, ValidationError
from .measures import DiscreteMeasure, TestFunction, pair
from .models import AlphaFunction, BSKernels
from .simulate import run_blocks

MAX_ORDER = 4


def _check_order(m):
    if not (1 <= m <= MAX_ORDER):
        raise ValidationError(f"order must lie in [1, {MAX_ORDER}], got {m}")


def first_moment(mu_s: DiscreteMeasure, phi: TestFunction, dt: float) -> float:
    """E[<phi, mu_{s+dt}> | mu_s] = <phi((. - dt)^+), mu_s>, whatever the model."""
    phi.require_d1()
    return pair(lambda x: phi.value(np.maximum(x - dt, 0.0)), mu_s)


def second_moment_affine(mu0: DiscreteMeasure, g: TestFunction, a: AlphaFunction, t: float,
                         n_quad: int = 401) -> float:
    """E[<g, mu_t>^2] for the affine model.

    ``<S_t g, mu0>^2 + int_0^t <S_{t-s}(alpha (S_s g)^2), mu0> ds`` with
    ``S_u h = h((. - u)^+)``; the time integral uses composite Simpson.
    """
    g.require_d1()
    if n_quad < 3:
        raise ValidationError("n_quad must be >= 3")
    n_quad += 1 - n_quad % 2
    first = pair(lambda x: g.value(np.maximum(x - t, 0.0)), mu0)
    if t == 0 or len(mu0) == 0:
        return first ** 2
    s = np.linspace(0.0, t, n_quad)
    y = np.maximum(mu0.x[None, :] - (t - s)[:, None], 0.0)
    inner = a(y) * np.asarray(g.value(np.maximum(y - s[:, None], 0.0)), dtype=float) ** 2
    integral = simpson(inner @ mu0.w, x=s)
    return float(first ** 2 + integral)


def future_moments_affine(mu0: DiscreteMeasure, c: FutureContract, tau: float, a: AlphaFunction,
                          n_quad: int = 401) -> tuple[float, float]:
    """(E[F(tau)], E[F(tau)^2]) for the affine model via the moment formula."""
    g = TestFunction(lambda y: c.payoff_weights(tau + np.asarray(y, dtype=float)),
                     lambda y: np.zeros(np.shape(y)))
    return first_moment(mu0, g, tau), second_moment_affine(mu0, g, a, tau, n_quad)


# --- dual operators ----------------------------------------------------------


@dataclass(frozen=True)
class DualAction:
    """Pointwise evaluators of L_m^m(g^m) on E^m and L_m^{m-1}(g^m) on E^{m-1}."""

    m: int
    top: Callable[[np.ndarray], np.ndarray]
    lower: Callable[[np.ndarray], np.ndarray]


def _prod_except(G, skip):
    keep = [k for k in range(G.shape[1]) if k not in skip]
    return np.prod(G[:, keep], axis=1) if keep else np.ones(G.shape[0])


def dual_apply(m: int, g: TestFunction, model: Union[AlphaFunction, BSKernels]) -> DualAction:
    _check_order(m)

    def transport(z):
        G, dG = g.value(z), g.derivative(z)
        return -sum(dG[:, j] * _prod_except(G, {j}) for j in range(m))

    if isinstance(model, AlphaFunction):
        alpha = model

        def top(z):
            z = np.atleast_2d(np.asarray(z, dtype=float))
            return transport(z)

        def lower(z):
            z = np.atleast_2d(np.asarray(z, dtype=float)).reshape(-1, m - 1) if m > 1 else np.zeros((1, 0))
            if m < 2:
                return np.zeros(z.shape[0])
            G = g.value(z)
            terms = sum(alpha(z[:, j]) * G[:, j] ** 2 * _prod_except(G, {j}) for j in range(m - 1))
            return 0.5 * m * terms

        return DualAction(m, top, lower)

    if isinstance(model, BSKernels):
        k = model

        def q2(zi, zj, gi, gj):
            return 0.5 * (k.pi_at(zi, zj) * gi ** 2 + k.pi_at(zj, zi) * gj ** 2 + 2.0 * k.beta_at(zi, zj) * gi * gj)

        def top(z):
            z = np.atleast_2d(np.asarray(z, dtype=float))
            G = g.value(z)
            out = transport(z)
            for i in range(m):
                for j in range(m):
                    if i != j:
                        out = out + 0.5 * q2(z[:, i], z[:, j], G[:, i], G[:, j]) * _prod_except(G, {i, j})
            return out

        def lower(z):
            return np.zeros(np.atleast_2d(z).shape[0])

        return DualAction(m, top, lower)
    raise ValidationError(f"unsupported model {type(model).__name__}")


# --- Feynman-Kac particle estimator --------------------------------------------


def _gamma(Z, k: BSKernels):
    m = Z.shape[-1]
    out = np.zeros(Z.shape[:-1])
    for i in range(m):
        for j in range(m):
            if i != j:
                out += k.pi_at(Z[..., i], Z[..., j]) + k.beta_at(Z[..., i], Z[..., j])
    return 0.5 * out


_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(8)


def _gamma_integral(Z, length, k):
    # int_0^length gamma((Z - u)^+) du along the deterministic flow
    u = 0.5 * (_GL_NODES + 1.0)[:, None] * length[None, :]
    Zs = np.maximum(Z[None, :, :] - u[:, :, None], 0.0)
    return 0.5 * length * np.tensordot(_GL_WEIGHTS, _gamma(Zs, k), axes=1)


def _jump_bound(k: BSKernels) -> float:
    b_beta, b_pi = k.bounds(64)
    if not (np.isfinite(b_beta) and np.isfinite(b_pi)):
        raise KernelBoundError("kernels are not bounded on the probe grid")
    return 1.5 * b_pi


def particle_paths(z0: np.ndarray, t: float, k: BSKernels, rng: np.random.Generator, pi_bound: float | None = None):
    """Simulate the interacting particle system from ``z0`` (shape (n, m)).

    Coordinates drift down with slope -1 and are absorbed at 0; coordinate
    ``j`` jumps onto coordinate ``i`` at rate ``pi(Z_i, Z_j) / 2`` (thinning
    with a global bound).  Returns ``(Z_t, int_0^t gamma(Z_s) ds)``.
    """
    Z = np.array(z0, dtype=float, copy=True)
    n, m = Z.shape
    pmax = _jump_bound(k) if pi_bound is None else pi_bound
    rate = 0.5 * pmax * m * (m - 1)
    log_w = np.zeros(n)
    now = np.zeros(n)
    if rate > 0:
        nxt = rng.exponential(1.0 / rate, size=n)
        active = nxt < t
        while np.any(active):
            idx = np.flatnonzero(active)
            step = nxt[idx] - now[idx]
            log_w[idx] += _gamma_integral(Z[idx], step, k)
            Z[idx] = np.maximum(Z[idx] - step[:, None], 0.0)
            now[idx] = nxt[idx]
            i = rng.integers(0, m, size=idx.size)
            j = (i + rng.integers(1, m, size=idx.size)) % m
            zi, zj = Z[idx, i], Z[idx, j]
            accept = rng.uniform(size=idx.size) * pmax < k.pi_at(zi, zj)
            Z[idx[accept], j[accept]] = zi[accept]
            nxt[idx] = now[idx] + rng.exponential(1.0 / rate, size=idx.size)
            active = nxt < t
    rest = t - now
    log_w += _gamma_integral(Z, rest, k)
    Z = np.maximum(Z - rest[:, None], 0.0)
    return Z, log_w


def particle_moment_bs(mu0: DiscreteMeasure, g: TestFunction, m: int, t: float, k: BSKernels,
                       n_paths: int = 100_000, seed: int = 0, threads: int | None = None) -> tuple[float, float]:
    """Monte Carlo estimate of E[<g, mu_t>^m] for a Black-Scholes type model.

    Uses ``<g_t, mu0^m> = mass^m E[exp(int_0^t gamma(Z_s) ds) prod_j g(Z_t^j)]``
    with ``Z_0^j`` iid from ``mu0 / mass`` and
    ``gamma(z) = 1/2 sum_{i != j} (pi + beta)(z_i, z_j)``.
    Returns ``(estimate, standard_error)``.
    """
    _check_order(m)
    mass = float(mu0.w.sum())
    if not mass > 0:
        raise ValidationError("initial measure must have positive mass")
    pmax = _jump_bound(k)
    p = mu0.w / mass

    def block(rng, size):
        z0 = mu0.x[rng.choice(mu0.x.size, size=(size, m), p=p)]
        Z, log_w = particle_paths(z0, t, k, rng, pmax)
        return np.exp(log_w) * np.prod(g.value(Z), axis=1)

    samples = run_blocks(block, n_paths, seed, threads) * mass ** m
    return float(samples.mean()), float(samples.std(ddof=1) / np.sqrt(samples.size))


def particle_generator_check(z: np.ndarray, g: TestFunction, k: BSKernels, delta: float = 1e-3,
                             n_paths: int = 100_000, seed: int = 0) -> tuple[float, float]:
    """Estimate ``(E_z[h(Z_delta) e^{int gamma}] - h(z)) / delta`` for ``h = g^{(x)m}``.

    Should match ``dual_apply(m, g, k).top(z)`` up to O(delta).
    """
    z = np.asarray(z, dtype=float)
    pmax = _jump_bound(k)
    h0 = float(np.prod(g.value(z)))

    def block(rng, size):
        Z, log_w = particle_paths(np.tile(z, (size, 1)), delta, k, rng, pmax)
        return (np.exp(log_w) * np.prod(g.value(Z), axis=1) - h0) / delta

    s = run_blocks(block, n_paths, seed, 1)
    return float(s.mean()), float(s.std(ddof=1) / np.sqrt(s.size))


# --- control variates --------------------------------------------------------


def control_variate_price(payoff_samples, poly_samples, poly_expectation: float, c: float | None = None):
    """Control-variate estimator ``mean(theta) - c (mean(p) - E[p])``.

    ``c`` defaults to the sample optimum ``Cov(theta, p) / Var(p)``.  Returns
    ``(price, variance_ratio)`` where the ratio compares the estimator's
    variance to plain Monte Carlo (``1 - Corr^2`` at the optimum).
    """
    th = np.asarray(payoff_samples, dtype=float)
    p = np.asarray(poly_samples, dtype=float)
    if th.shape != p.shape or th.ndim != 1:
        raise ShapeError("payoff and polynomial samples must be 1-d of equal length")
    if th.size < 2:
        raise ShapeError("need at least two samples")
    cov = np.cov(th, p, ddof=1)
    if c is None:
        if not cov[1, 1] > 0:
            raise DegenerateControl("control has zero variance")
        # both entries come from the same product, so p == theta gives c == 1 exactly
        c = float(cov[0, 1] / cov[1, 1])
    price = float(th.mean() - c * (p.mean() - poly_expectation))
    var_th = th.var(ddof=1)
    if var_th > 0:
        ratio = float(np.var(th - c * p, ddof=1) / var_th)
    else:
        ratio = 0.0
    return price, max(ratio, 0.0)
