"""Atomic forward-curve states on the time-to-maturity domain E = [0, T].

A state is a finite non-negative measure ``sum_i w_i * delta_{x_i}``.  Test
functions act on it by pairing, ``<phi, mu> = sum_i w_i * phi(x_i)``.
"""
from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import D1Error, DomainError, EvaluationError, ParseError

D1_TOL = 1e-12
MERGE_TOL = 1e-12


@dataclass(frozen=True)
class DomainConfig:
    horizon: float

    def __post_init__(self):
        if not (np.isfinite(self.horizon) and self.horizon > 0):
            raise DomainError(f"horizon must be positive, got {self.horizon}")

    def check_time(self, t: float, name: str = "t") -> float:
        t = float(t)
        if not (0.0 <= t <= self.horizon):
            raise DomainError(f"{name}={t} outside [0, {self.horizon}]")
        return t


@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Finite non-negative atomic measure on [0, horizon].

    Duplicate locations are allowed; :meth:`normalize` merges them.
    """

    x: np.ndarray
    w: np.ndarray
    horizon: float

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float)).copy()
        w = np.atleast_1d(np.asarray(self.w, dtype=float)).copy()
        if x.shape != w.shape or x.ndim != 1:
            raise DomainError("atom locations and weights must be 1-d arrays of equal length")
        DomainConfig(self.horizon)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(w))):
            raise DomainError("atoms must be finite")
        if np.any(w < 0):
            raise DomainError("weights must be non-negative")
        if np.any(x < 0) or np.any(x > self.horizon):
            raise DomainError(f"atom locations must lie in [0, {self.horizon}]")
        x.flags.writeable = False
        w.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "horizon", float(self.horizon))

    @classmethod
    def empty(cls, horizon: float) -> "DiscreteMeasure":
        return cls(np.empty(0), np.empty(0), horizon)

    @classmethod
    def from_atoms(cls, atoms: Iterable[tuple[float, float]], horizon: float) -> "DiscreteMeasure":
        atoms = list(atoms)
        if not atoms:
            return cls.empty(horizon)
        x, w = zip(*atoms)
        return cls(np.array(x), np.array(w), horizon)

    def __len__(self) -> int:
        return self.x.size

    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.w.tolist()))

    def normalize(self) -> "DiscreteMeasure":
        """Sort atoms and merge locations closer than 1e-12."""
        if len(self) == 0:
            return self
        order = np.argsort(self.x, kind="stable")
        x, w = self.x[order], self.w[order]
        new_group = np.concatenate([[True], np.diff(x) > MERGE_TOL])
        starts = np.flatnonzero(new_group)
        return DiscreteMeasure(x[starts], np.add.reduceat(w, starts), self.horizon)

    def mass_at_zero(self) -> float:
        return float(self.w[self.x == 0.0].sum())

    def __add__(self, other: "DiscreteMeasure") -> "DiscreteMeasure":
        return DiscreteMeasure(
            np.concatenate([self.x, other.x]),
            np.concatenate([self.w, other.w]),
            max(self.horizon, other.horizon),
        )

    def scale(self, c: float) -> "DiscreteMeasure":
        return DiscreteMeasure(self.x, c * self.w, self.horizon)


@dataclass(frozen=True, eq=False)
class TestFunction:
    """Test function with derivative; D1 membership is certified on construction.

    Both callables must accept numpy arrays.
    """

    __test__ = False  # not a pytest class

    value: Callable[[np.ndarray], np.ndarray]
    derivative: Callable[[np.ndarray], np.ndarray]
    certified_d1: bool = field(init=False)

    def __post_init__(self):
        d0 = np.asarray(self.derivative(np.array([0.0])), dtype=complex)
        ok = bool(np.all(np.isfinite(d0)) and np.all(np.abs(d0) <= D1_TOL))
        object.__setattr__(self, "certified_d1", ok)

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))

    def require_d1(self) -> "TestFunction":
        if not self.certified_d1:
            raise D1Error("test function must satisfy phi'(0) = 0")
        return self

    def shifted(self, t: float) -> "TestFunction":
        """x -> phi((x - t)^+)."""
        f, df = self.value, self.derivative
        return TestFunction(
            lambda x: f(np.maximum(np.asarray(x, dtype=float) - t, 0.0)),
            lambda x: np.where(np.asarray(x) > t, 1.0, 0.0) * df(np.maximum(np.asarray(x, dtype=float) - t, 0.0)),
        )

    @classmethod
    def constant(cls, c: float) -> "TestFunction":
        return cls(lambda x: np.full(np.shape(x), c, dtype=float), lambda x: np.zeros(np.shape(x)))

    @classmethod
    def polynomial(cls, coeffs) -> "TestFunction":
        """Polynomial with ascending coefficients ``c0 + c1 x + ...``."""
        p = np.polynomial.Polynomial(coeffs)
        dp = p.deriv()
        return cls(lambda x: p(np.asarray(x, dtype=float)), lambda x: dp(np.asarray(x, dtype=float)))


def pair(phi: Callable, mu: DiscreteMeasure):
    """<phi, mu> = sum_i w_i phi(x_i)."""
    if len(mu) == 0:
        return 0.0
    vals = np.asarray(phi(mu.x))
    if vals.shape != mu.x.shape:
        vals = np.broadcast_to(vals, mu.x.shape)
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("test function is not finite at an atom")
    out = np.dot(mu.w, vals)
    return complex(out) if np.iscomplexobj(out) else float(out)


def total_mass(mu: DiscreteMeasure) -> float:
    return float(mu.w.sum())


def shift_absorb(mu: DiscreteMeasure, t: float) -> DiscreteMeasure:
    """Transport every atom x -> (x - t)^+; mass reaching 0 stays there."""
    t = DomainConfig(mu.horizon).check_time(t)
    return DiscreteMeasure(np.maximum(mu.x - t, 0.0), mu.w, mu.horizon)


def spot_proxy(mu: DiscreteMeasure, tau_star: float) -> float:
    """Average of the state over (0, tau_star]; atoms exactly at 0 are excluded."""
    if not tau_star > 0:
        raise DomainError("tau_star must be positive")
    if tau_star > mu.horizon:
        raise DomainError(f"tau_star={tau_star} exceeds horizon {mu.horizon}")
    mask = (mu.x > 0) & (mu.x <= tau_star)
    return float(mu.w[mask].sum() / tau_star)


def load_forward_curve(path, horizon: float | None = None, scale: float = 1.0) -> DiscreteMeasure:
    """Read a forward curve CSV.

    Accepts ``x,weight`` (x in year fractions) or daily ``date,value`` rows.
    Daily values become atoms at (date - first date)/365 with weight
    ``value / 365``.  All weights are divided by ``scale``.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    rows = [r for r in rows if r and any(c.strip() for c in r)]
    if not rows:
        raise ParseError(f"{path}: empty file")
    header = [c.strip().lower() for c in rows[0]]
    body = rows[1:]
    try:
        if header[:2] == ["x", "weight"]:
            x = np.array([float(r[0]) for r in body])
            w = np.array([float(r[1]) for r in body])
        elif header[:2] == ["date", "value"]:
            dates = [_dt.date.fromisoformat(r[0].strip()) for r in body]
            vals = np.array([float(r[1]) for r in body])
            d0 = dates[0] if dates else None
            x = np.array([(d - d0).days / 365.0 for d in dates])
            w = vals / 365.0
        else:
            raise ParseError(f"{path}: header must be 'x,weight' or 'date,value', got {rows[0]}")
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: malformed row ({exc})") from exc
    if horizon is None:
        horizon = float(x.max()) if x.size and x.max() > 0 else 1.0
    return DiscreteMeasure(x, w / scale, horizon)


def write_forward_curve(path, mu: DiscreteMeasure) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x", "weight"])
        for x, w in mu.atoms():
            wr.writerow([repr(x), repr(w)])
