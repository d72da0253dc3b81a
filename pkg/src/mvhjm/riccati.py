"""Affine-model analytics: closed-form Riccati solution, Laplace transform and
damped Fourier pricing of calls and puts on delivery-period futures.

For the affine model the Riccati equation

    d/dt psi = -psi' + 1/2 alpha psi^2,    psi_0 = g

is solved by ``g((x-t)^+) / (1 - g((x-t)^+) * theta(x, t) / 2)`` where
``theta(x, t) = int_0^t alpha((x - s)^+) ds``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .contracts import FutureContract, OptionSpec
from .errors import DampingTooLarge, DomainError, QuadratureWarning, RiccatiBlowup
from .measures import DiscreteMeasure
from .models import AlphaFunction

DENOM_TOL = 1e-10
DAMPING_MARGIN = 1e-6


@dataclass(frozen=True)
class FourierConfig:
    """Uniform trapezoid grid for the lambda integral."""

    lambda_min: float = -100.0
    lambda_max: float = 100.0
    n_lambda: int = 4001
    damping: float = 1.0

    def __post_init__(self):
        if self.n_lambda < 2:
            raise DomainError("n_lambda must be >= 2")
        if not np.isclose(self.lambda_min, -self.lambda_max) or self.lambda_max <= 0:
            raise DomainError("lambda grid must be symmetric about 0")
        if self.damping <= 0:
            raise DomainError("damping must be positive")

    @classmethod
    def symmetric(cls, lambda_max: float = 100.0, n_lambda: int = 4001, damping: float = 1.0) -> "FourierConfig":
        return cls(-lambda_max, lambda_max, n_lambda, damping)

    def grid(self):
        lam = np.linspace(self.lambda_min, self.lambda_max, self.n_lambda)
        wts = np.full(self.n_lambda, lam[1] - lam[0])
        wts[[0, -1]] *= 0.5
        return lam, wts


@dataclass(frozen=True)
class RiccatiSolution:
    """psi_t(x) for a fixed initial condition and alpha."""

    g: Callable
    alpha: AlphaFunction

    def __call__(self, t, x):
        return riccati_psi(self.g, self.alpha, t, x)


def riccati_psi(g: Callable, a: AlphaFunction, t: float, x):
    """Closed-form Riccati solution at (t, x); g may be complex valued."""
    x = np.asarray(x, dtype=float)
    gy = np.asarray(g(np.maximum(x - t, 0.0)))
    theta = a.transported_integral(x, t)
    den = 1.0 - 0.5 * gy * theta
    if np.any(np.abs(den) <= DENOM_TOL):
        raise RiccatiBlowup("Riccati denominator vanished; exponential moment does not exist")
    return gy / den


def laplace_transform(mu_s: DiscreteMeasure, g: Callable, a: AlphaFunction, dt: float):
    """E[exp(<g, mu_{s+dt}>) | mu_s] = exp(<psi_dt, mu_s>)."""
    if len(mu_s) == 0:
        return 1.0
    val = np.exp(np.dot(mu_s.w, riccati_psi(g, a, dt, mu_s.x)))
    return complex(val) if np.iscomplexobj(val) else float(val)


def psi_fourier(lam, option: OptionSpec, c: FutureContract, a: AlphaFunction, x, damping: float | None = None):
    """psi_tau^lambda(x) at exercise; shape (len(lam), len(x)).

    ``2 z w(x) / (2 - z w(x) (A(x) - A(x - tau)))`` on (tau1, tau2], else 0,
    with ``z = C + i lambda``.
    """
    C = option.damping if damping is None else damping
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    wx = c.payoff_weights(x)
    theta = a.transported_integral(x, option.tau)
    zw = (C + 1j * lam)[:, None] * wx[None, :]
    den = 2.0 - zw * theta[None, :]
    inside = wx != 0
    if np.any(np.abs(den[:, inside]) <= DENOM_TOL):
        raise RiccatiBlowup("Fourier Riccati denominator vanished")
    return np.where(inside[None, :], 2.0 * zw / den, 0.0)


def damping_ratio(mu0: DiscreteMeasure, c: FutureContract, tau: float, a: AlphaFunction, damping: float) -> float:
    """max over delivery atoms of |C| w(x) (A(x) - A(x - tau)) / 2; must stay below 1."""
    wx = c.payoff_weights(mu0.x)
    inside = wx != 0
    if not np.any(inside):
        return 0.0
    theta = a.transported_integral(mu0.x[inside], tau)
    return float(np.max(abs(damping) * np.abs(wx[inside]) * 0.5 * theta))


def check_damping(mu0, c, tau, a, damping) -> None:
    r = damping_ratio(mu0, c, tau, a, damping)
    if r >= 1.0 - DAMPING_MARGIN:
        raise DampingTooLarge(
            f"damping {damping} violates the exponential moment bound (ratio {r:.4g} >= 1); reduce |C|")


def _fourier_core(mu0, c, tau, a, strikes, damping, f: FourierConfig, grad=False):
    x_all = mu0.x
    wx_all = c.payoff_weights(x_all)
    inside = wx_all != 0
    x, m, wx = x_all[inside], mu0.w[inside], wx_all[inside]
    theta = a.transported_integral(x, tau)
    lam, wts = f.grid()
    z = damping + 1j * lam
    zw = z[:, None] * wx[None, :]
    den = 2.0 - zw * theta[None, :]
    if np.any(np.abs(den) <= DENOM_TOL):
        raise RiccatiBlowup("Fourier Riccati denominator vanished")
    psi = 2.0 * zw / den
    char = np.exp(psi @ m)
    K = np.atleast_1d(np.asarray(strikes, dtype=float))
    kern = np.exp(-z[:, None] * K[None, :]) / (z[:, None] ** 2) / (2.0 * np.pi)
    weighted = (wts * char)[:, None] * kern
    prices = weighted.sum(axis=0)
    dtheta = None
    if grad:
        # d psi / d theta = psi^2 / 2
        dtheta = np.real(weighted.T @ (0.5 * psi ** 2 * m[None, :]))
    return prices, dtheta, x


def _finish(prices, strict_imag=True):
    re, im = prices.real, prices.imag
    bad = np.abs(im) > 1e-6 * (1.0 + np.abs(re))
    if np.any(bad):
        warnings.warn(f"imaginary residual {np.max(np.abs(im)):.3g} exceeds tolerance", QuadratureWarning, stacklevel=3)
    return np.maximum(re, 0.0)


def fourier_prices(mu0: DiscreteMeasure, c: FutureContract, strikes: Sequence[float], tau: float,
                   a: AlphaFunction, f: FourierConfig = FourierConfig(), damping: float | None = None):
    """Call prices (put prices for negative damping) for several strikes sharing one lambda grid."""
    C = f.damping if damping is None else damping
    OptionSpec(0.0, tau, C).check_contract(c)
    check_damping(mu0, c, tau, a, C)
    prices, _, _ = _fourier_core(mu0, c, tau, a, strikes, C, f)
    return _finish(prices)


def fourier_call_price(mu0: DiscreteMeasure, c: FutureContract, option: OptionSpec, a: AlphaFunction,
                       f: FourierConfig = FourierConfig()) -> float:
    """E[(F(tau, tau1, tau2) - K)^+] by damped Fourier inversion."""
    if option.damping <= 0:
        raise DomainError("call pricing needs a positive damping")
    return float(fourier_prices(mu0, c, [option.strike], option.tau, a, f, option.damping)[0])


def fourier_put_price(mu0: DiscreteMeasure, c: FutureContract, option: OptionSpec, a: AlphaFunction,
                      f: FourierConfig = FourierConfig()) -> float:
    """E[(K - F)^+]; the same inversion with damping -|C| picks up the pole at 0."""
    return float(fourier_prices(mu0, c, [option.strike], option.tau, a, f, -abs(option.damping))[0])


def fourier_prices_with_grad(mu0, c, strikes, tau, a: AlphaFunction, f: FourierConfig = FourierConfig(),
                             damping: float | None = None):
    """Call prices and their gradient with respect to ``a.params()``.

    Returns ``(prices, jac)`` with ``jac`` of shape (n_strikes, n_params).
    """
    C = f.damping if damping is None else damping
    check_damping(mu0, c, tau, a, C)
    prices, dtheta, x = _fourier_core(mu0, c, tau, a, strikes, C, f, grad=True)
    out = _finish(prices)
    floored = prices.real < 0
    jac = np.stack([
        np.zeros(a.params().size) if floored[k] else a.transported_integral_vjp(x, tau, dtheta[k])
        for k in range(dtheta.shape[0])
    ])
    return out, jac
