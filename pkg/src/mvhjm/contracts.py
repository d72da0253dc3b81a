"""Delivery-period futures priced as integrals against the forward state."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractExpired, DomainError, PartitionError
from .measures import DiscreteMeasure

SNAP = 1e-12


def _snap(v):
    # (tau1, tau2] membership is decided on a 1e-12 grid so that t + x landing
    # on a boundary is classified deterministically.
    return np.round(np.asarray(v, dtype=float) / SNAP) * SNAP


@dataclass(frozen=True)
class FutureContract:
    """Future with delivery over (tau1, tau2].

    ``weight`` maps a maturity ``u`` to ``w(u; tau1, tau2)``; ``None`` is the
    uniform average ``1 / (tau2 - tau1)``.
    """

    tau1: float
    tau2: float
    weight: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if not (0.0 <= self.tau1 < self.tau2):
            raise DomainError(f"need 0 <= tau1 < tau2, got ({self.tau1}, {self.tau2})")

    @property
    def uniform(self) -> bool:
        return self.weight is None

    def w(self, u):
        u = np.asarray(u, dtype=float)
        if self.weight is None:
            return np.full(u.shape, 1.0 / (self.tau2 - self.tau1))
        vals = np.asarray(self.weight(u), dtype=float)
        return np.broadcast_to(vals, u.shape)

    def indicator(self, u):
        u = _snap(u)
        return (u > _snap(self.tau1)) & (u <= _snap(self.tau2))

    def payoff_weights(self, u):
        """w(u) * 1_{(tau1, tau2]}(u), zero outside the delivery period."""
        u = np.asarray(u, dtype=float)
        ind = self.indicator(u)
        out = np.zeros(u.shape)
        if np.any(ind):
            out[ind] = self.w(u[ind])
        if not np.all(np.isfinite(out)):
            raise DomainError("weight function is not finite on the delivery period")
        return out

    def max_weight(self, u) -> float:
        pw = self.payoff_weights(u)
        return float(np.max(np.abs(pw))) if pw.size else 0.0


@dataclass(frozen=True)
class OptionSpec:
    """European option on a future: strike, exercise time and Fourier damping."""

    strike: float
    tau: float
    damping: float = 1.0

    def __post_init__(self):
        if self.strike < 0:
            raise DomainError("strike must be non-negative")
        if self.tau < 0:
            raise DomainError("exercise time must be non-negative")
        if self.damping == 0:
            raise DomainError("damping must be non-zero")

    def check_contract(self, c: FutureContract) -> None:
        if self.tau > c.tau1:
            raise ContractExpired(f"exercise {self.tau} after delivery start {c.tau1}")


def future_price(mu: DiscreteMeasure, t: float, c: FutureContract) -> float:
    """F(t, tau1, tau2) = sum_i w(t + x_i) 1_{(tau1, tau2]}(t + x_i) w_i."""
    if t > c.tau1:
        raise ContractExpired(f"t={t} is after the delivery start tau1={c.tau1}")
    if len(mu) == 0:
        return 0.0
    return float(np.dot(c.payoff_weights(t + mu.x), mu.w))


def future_price_discrete(mu_vec, t: int, tau1: int, tau2: int, w: Callable = None) -> float:
    """Discrete-maturity future on E = {0, ..., T}.

    ``sum_i 1_{(tau1, tau2]}(t + i) w(t + i) mu(i)``.
    """
    mu_vec = np.asarray(mu_vec, dtype=float)
    T = mu_vec.size - 1
    if not (0 <= t <= tau1 < tau2 <= T):
        raise DomainError(f"need 0 <= t <= tau1 < tau2 <= {T}, got t={t}, tau1={tau1}, tau2={tau2}")
    if np.any(mu_vec < 0):
        raise DomainError("components must be non-negative")
    u = t + np.arange(T + 1)
    mask = (u > tau1) & (u <= tau2)
    wv = np.ones(mask.sum()) if w is None else np.asarray([w(v) for v in u[mask]], dtype=float)
    return float(np.dot(wv, mu_vec[mask]))


def cumulative_delivery(
    mu: DiscreteMeasure,
    t: float,
    periods: Sequence[tuple[float, float]],
    weight: Optional[Callable] = None,
) -> float:
    """Sum of sub-period integrals over a partition of (tau_1, tau_n].

    Every sub-period integral uses the weight of the whole period, so the
    result equals the future on (tau_1, tau_n] priced directly.
    """
    if not periods:
        raise PartitionError("no delivery periods")
    for (a0, b0), (a1, _) in zip(periods, periods[1:]):
        if _snap(b0) != _snap(a1):
            raise PartitionError(f"periods are not contiguous at {b0} / {a1}")
    first, last = periods[0][0], periods[-1][1]
    whole = FutureContract(first, last, weight)
    return float(sum(future_price(mu, t, FutureContract(a, b, whole.w)) for a, b in periods))
