"""Model parameters: the affine branching rate alpha, Black-Scholes type kernels
(beta, pi), and the drift matrix of the discrete-maturity scheme.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, ValidationError

ACTIVATIONS = ("tanh", "relu", "linear")


class AlphaFunction:
    """Non-negative branching-rate function on [0, horizon] with primitive A.

    Subclasses expose their trainable parameters as a flat vector so the
    calibrator can treat every representation the same way.
    """

    horizon: float

    def __call__(self, x):
        raise NotImplementedError

    def primitive(self, x):
        raise NotImplementedError

    def transported_integral(self, x, t):
        """int_0^t alpha((x - s)^+) ds, vectorised over x."""
        x = np.asarray(x, dtype=float)
        t = float(t)
        inside = self.primitive(x) - self.primitive(np.maximum(x - t, 0.0))
        a0 = float(self(np.array([0.0]))[0])
        return np.where(t <= x, inside, self.primitive(x) + a0 * np.maximum(t - x, 0.0))

    def params(self) -> np.ndarray:
        raise NotImplementedError

    def with_params(self, p: np.ndarray) -> "AlphaFunction":
        raise NotImplementedError

    def transported_integral_vjp(self, x, t, cot) -> np.ndarray:
        """Gradient of sum_m cot_m * transported_integral(x_m, t) w.r.t. params()."""
        raise NotImplementedError

    def project(self, p: np.ndarray) -> np.ndarray:
        return p

    def to_dict(self) -> dict:
        raise NotImplementedError

    def _check_domain(self, x):
        x = np.asarray(x, dtype=float)
        if np.any(x < 0) or np.any(x > self.horizon + 1e-12):
            raise DomainError(f"alpha evaluated outside [0, {self.horizon}]")
        return x


class PiecewiseLinearAlpha(AlphaFunction):
    """alpha linear between grid nodes; its primitive is exact."""

    def __init__(self, grid, values):
        grid = np.asarray(grid, dtype=float)
        values = np.asarray(values, dtype=float)
        if grid.ndim != 1 or grid.size < 2 or grid.shape != values.shape:
            raise ValidationError("grid and values must be 1-d of equal length >= 2")
        if grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise ValidationError("grid must start at 0 and be strictly increasing")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValidationError("alpha values must be finite and non-negative")
        self.grid = grid
        self.values = values
        self.horizon = float(grid[-1])
        h = np.diff(grid)
        self._h = h
        self._cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (values[:-1] + values[1:]))])

    @classmethod
    def constant(cls, value: float, horizon: float) -> "PiecewiseLinearAlpha":
        return cls([0.0, horizon], [value, value])

    def _locate(self, x):
        j = np.clip(np.searchsorted(self.grid, x, side="right") - 1, 0, self.grid.size - 2)
        return j, x - self.grid[j]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.maximum(np.interp(x, self.grid, self.values), 0.0)

    def primitive(self, x):
        x = np.asarray(x, dtype=float)
        j, d = self._locate(x)
        a0, a1 = self.values[j], self.values[j + 1]
        return self._cum[j] + a0 * d + (a1 - a0) * d * d / (2.0 * self._h[j])

    def _primitive_rows(self, x):
        # A(x) = rows(x) @ values
        n = self.grid.size
        j, d = self._locate(x)
        cum_rows = np.zeros((n, n))
        for k in range(1, n):
            cum_rows[k] = cum_rows[k - 1]
            cum_rows[k, k - 1] += 0.5 * self._h[k - 1]
            cum_rows[k, k] += 0.5 * self._h[k - 1]
        rows = cum_rows[j].copy()
        q = d * d / (2.0 * self._h[j])
        idx = np.arange(x.size)
        rows[idx, j] += d - q
        rows[idx, j + 1] += q
        return rows

    def params(self):
        return self.values.copy()

    def with_params(self, p):
        return PiecewiseLinearAlpha(self.grid, np.maximum(np.asarray(p, dtype=float), 0.0))

    def project(self, p):
        return np.maximum(p, 0.0)

    def transported_integral_vjp(self, x, t, cot):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        cot = np.broadcast_to(np.asarray(cot, dtype=float), x.shape)
        rows = self._primitive_rows(x) - self._primitive_rows(np.maximum(x - t, 0.0))
        beyond = t > x
        if np.any(beyond):
            rows[beyond] = self._primitive_rows(x[beyond])
            rows[beyond, 0] += t - x[beyond]
        return cot @ rows

    def to_dict(self):
        return {"grid": self.grid.tolist(), "values": self.values.tolist()}


@dataclass
class MLPAlpha:
    """Three dense layers, tanh then relu then relu, scalar in and out.

    ``layers`` holds ``(W, b, act)`` with ``W`` of shape (out, in).  The final
    relu makes the output non-negative for every input; ``output_scale``
    multiplies the raw network output.
    """

    layers: list
    output_scale: float = 1.0

    def __post_init__(self):
        if len(self.layers) != 3:
            raise ValidationError("MLPAlpha needs exactly three layers")
        acts = [act for _, _, act in self.layers]
        if acts != ["tanh", "relu", "relu"]:
            raise ValidationError(f"activations must be tanh, relu, relu; got {acts}")
        self.layers = [(np.asarray(W, dtype=float), np.asarray(b, dtype=float), act) for W, b, act in self.layers]
        if self.layers[0][0].shape[1] != 1 or self.layers[-1][0].shape[0] != 1:
            raise ValidationError("network must map scalars to scalars")

    @classmethod
    def init(cls, width: int = 32, alpha0: float = 0.05, seed: int = 0, output_scale: float = 1.0) -> "MLPAlpha":
        """Random network whose output is close to the constant ``alpha0``."""
        rng = np.random.default_rng(seed)
        W1 = rng.normal(0.0, 2.0, size=(width, 1))
        b1 = rng.normal(0.0, 0.5, size=width)
        W2 = rng.normal(0.0, 1.0 / np.sqrt(width), size=(width, width))
        b2 = np.full(width, 0.1)
        W3 = rng.normal(0.0, 0.01 / np.sqrt(width), size=(1, width))
        s = np.linspace(0.0, 1.0, 65)
        h2 = np.maximum(np.tanh(s[:, None] * W1[:, 0] + b1) @ W2.T + b2, 0.0)
        b3 = np.array([alpha0 / output_scale - float(np.mean(h2 @ W3[0]))])
        return cls([(W1, b1, "tanh"), (W2, b2, "relu"), (W3, b3, "relu")], output_scale)

    @property
    def shapes(self):
        return [(W.shape, b.shape) for W, b, _ in self.layers]

    def params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b.ravel()]) for W, b, _ in self.layers])

    def with_params(self, p) -> "MLPAlpha":
        p = np.asarray(p, dtype=float)
        layers, k = [], 0
        for W, b, act in self.layers:
            nW, nb = W.size, b.size
            layers.append((p[k:k + nW].reshape(W.shape), p[k + nW:k + nW + nb].copy(), act))
            k += nW + nb
        if k != p.size:
            raise ValidationError(f"expected {k} parameters, got {p.size}")
        return MLPAlpha(layers, self.output_scale)

    def forward(self, s, cache: bool = False):
        h = np.asarray(s, dtype=float).reshape(-1, 1)
        saved = []
        for W, b, act in self.layers:
            z = h @ W.T + b
            saved.append((h, z))
            if act == "tanh":
                h = np.tanh(z)
            elif act == "relu":
                h = np.maximum(z, 0.0)
            else:
                h = z
        out = self.output_scale * h[:, 0]
        return (out, saved) if cache else out

    def backward(self, saved, g_out) -> np.ndarray:
        """Parameter gradient of sum(g_out * forward(s))."""
        g = self.output_scale * np.asarray(g_out, dtype=float).reshape(-1, 1)
        grads = []
        for (W, b, act), (h_in, z) in zip(reversed(self.layers), reversed(saved)):
            if act == "tanh":
                g = g * (1.0 - np.tanh(z) ** 2)
            elif act == "relu":
                g = g * (z > 0)
            grads.append((g.T @ h_in, g.sum(axis=0)))
            g = g @ W
        grads.reverse()
        return np.concatenate([np.concatenate([gW.ravel(), gb.ravel()]) for gW, gb in grads])

    def to_dict(self) -> dict:
        return {
            "output_scale": self.output_scale,
            "layers": [{"W": W.tolist(), "b": b.tolist(), "act": act} for W, b, act in self.layers],
        }


class NeuralAlpha(AlphaFunction):
    """alpha(x) = MLP(x / horizon); primitive by composite Simpson on 2048 panels."""

    def __init__(self, mlp: MLPAlpha, horizon: float, n_simpson: int = 2048):
        if n_simpson % 2:
            raise ValidationError("n_simpson must be even")
        self.mlp = mlp
        self.horizon = float(horizon)
        self.n_simpson = n_simpson
        self.nodes = np.linspace(0.0, self.horizon, n_simpson + 1)
        self._h = self.horizon / n_simpson
        self._node_vals, self._cache = self.mlp.forward(self.nodes / self.horizon, cache=True)
        self._A = np.maximum.accumulate(self._cumulative(self._node_vals))

    def _cumulative(self, f):
        # Simpson panel split into its two halves so A is available on every node.
        h = self._h
        f0, f1, f2 = f[0:-2:2], f[1:-1:2], f[2::2]
        inc = np.empty(f.size - 1)
        inc[0::2] = h * (5 * f0 + 8 * f1 - f2) / 12.0
        inc[1::2] = h * (-f0 + 8 * f1 + 5 * f2) / 12.0
        return np.concatenate([[0.0], np.cumsum(inc)])

    def _cumulative_adjoint(self, gA):
        h = self._h
        g_inc = np.cumsum(gA[::-1])[::-1][1:]
        ga, gb = g_inc[0::2], g_inc[1::2]
        gf = np.zeros(self.nodes.size)
        gf[0:-2:2] += h * (5 * ga - gb) / 12.0
        gf[1:-1:2] += h * (8 * ga + 8 * gb) / 12.0
        gf[2::2] += h * (-ga + 5 * gb) / 12.0
        return gf

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.mlp.forward(x.ravel() / self.horizon).reshape(x.shape)

    def primitive(self, x):
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.nodes, self._A)

    def _interp_adjoint(self, x, cot, gA):
        pos = np.clip(np.asarray(x, dtype=float) / self._h, 0.0, self.n_simpson)
        k = np.minimum(np.floor(pos).astype(int), self.n_simpson - 1)
        frac = pos - k
        np.add.at(gA, k, cot * (1.0 - frac))
        np.add.at(gA, k + 1, cot * frac)

    def transported_integral(self, x, t):
        x = np.asarray(x, dtype=float)
        t = float(t)
        A = self.primitive
        return np.where(t <= x, A(x) - A(np.maximum(x - t, 0.0)), A(x) + self._node_vals[0] * np.maximum(t - x, 0.0))

    def params(self):
        return self.mlp.params()

    def with_params(self, p):
        return NeuralAlpha(self.mlp.with_params(p), self.horizon, self.n_simpson)

    def transported_integral_vjp(self, x, t, cot):
        x = np.atleast_1d(np.asarray(x, dtype=float))
        cot = np.broadcast_to(np.asarray(cot, dtype=float), x.shape)
        gA = np.zeros(self.nodes.size)
        self._interp_adjoint(x, cot, gA)
        inside = t <= x
        self._interp_adjoint(np.maximum(x - t, 0.0)[inside], -cot[inside], gA)
        gf = self._cumulative_adjoint(gA)
        gf[0] += float(np.sum(cot[~inside] * (t - x[~inside])))
        return self.node_vjp(gf)

    def node_vjp(self, g_nodes) -> np.ndarray:
        """Parameter gradient of sum(g_nodes * alpha(nodes))."""
        return self.mlp.backward(self._cache, g_nodes)

    def to_dict(self):
        d = self.mlp.to_dict()
        d.update(horizon=self.horizon, n_simpson=self.n_simpson)
        return d


def alpha_eval(a: AlphaFunction, x):
    """alpha(x) >= 0; raises DomainError outside [0, horizon]."""
    x = a._check_domain(x)
    out = np.maximum(a(x), 0.0)
    return float(out) if out.ndim == 0 else out


def alpha_transported_integral(a: AlphaFunction, x, t):
    """int_0^t alpha((x - s)^+) ds, i.e. A(x) - A(x - t) or A(x) + alpha(0)(t - x)."""
    x = a._check_domain(x)
    if not (0.0 <= t <= a.horizon + 1e-12):
        raise DomainError(f"t={t} outside [0, {a.horizon}]")
    out = a.transported_integral(x, t)
    return float(out) if np.ndim(out) == 0 else out


def alpha_from_dict(d: dict, horizon: float | None = None) -> AlphaFunction:
    if "grid" in d:
        return PiecewiseLinearAlpha(d["grid"], d["values"])
    if "layers" in d:
        mlp = MLPAlpha([(l["W"], l["b"], l["act"]) for l in d["layers"]], d.get("output_scale", 1.0))
        hz = d.get("horizon", horizon)
        if hz is None:
            raise ValidationError("neural alpha needs a horizon")
        return NeuralAlpha(mlp, hz, d.get("n_simpson", 2048))
    raise ValidationError("alpha JSON needs either {grid, values} or {layers}")


def save_alpha(a: AlphaFunction, path) -> None:
    with open(path, "w") as fh:
        json.dump(a.to_dict(), fh)


def load_alpha(path, horizon: float | None = None) -> AlphaFunction:
    with open(path) as fh:
        return alpha_from_dict(json.load(fh), horizon)


# --- Black-Scholes type kernels ---------------------------------------------


@dataclass(frozen=True)
class BSKernels:
    """Symmetric covariance kernel beta and jump kernel pi, both vectorised."""

    beta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    pi: Callable[[np.ndarray, np.ndarray], np.ndarray]
    horizon: float = 1.0

    @classmethod
    def constant(cls, b: float, p: float = 0.0, horizon: float = 1.0) -> "BSKernels":
        def pi(x, y):
            x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
            return np.where(x == y, 0.0, p)

        return cls(lambda x, y: np.full(np.broadcast(x, y).shape, float(b)), pi, horizon)

    def beta_at(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return np.broadcast_to(np.asarray(self.beta(x, y), dtype=float), x.shape)

    def pi_at(self, x, y):
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        return np.broadcast_to(np.asarray(self.pi(x, y), dtype=float), x.shape)

    def bounds(self, n_probe: int = 64) -> tuple[float, float]:
        """(sup |beta|, sup pi) over an n_probe^2 grid of [0, horizon]^2."""
        g = np.linspace(0.0, self.horizon, n_probe)
        X, Y = np.meshgrid(g, g, indexing="ij")
        return float(np.max(np.abs(self.beta_at(X, Y)))), float(np.max(self.pi_at(X, Y)))


@dataclass
class AdmissibilityReport:
    passed: bool
    n_checked: int
    failures: list = field(default_factory=list)

    def to_dict(self):
        return {"pass": self.passed, "n_checked": self.n_checked, "failures": self.failures}


def check_admissibility(k: BSKernels, n_samples: int = 200, seed: int = 0, max_points: int = 8,
                        tol: float = 1e-9) -> AdmissibilityReport:
    """Sampled check of the (beta, pi) conditions.

    For random points x_1..x_n and weights c_1..c_n > 0 the matrix
    beta_n + diag(sum_j (c_j / c_i) pi(x_i, x_j)) must be positive
    semidefinite; failures are collected, never raised.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    failures = []

    def fail(kind, **info):
        if len(failures) < 20:
            failures.append({"check": kind, **{k_: np.asarray(v).tolist() for k_, v in info.items()}})

    for _ in range(n_samples):
        n = int(rng.integers(1, max_points + 1))
        x = rng.uniform(0.0, k.horizon, size=n)
        c = np.exp(rng.normal(0.0, 1.0, size=n))
        X, Y = np.meshgrid(x, x, indexing="ij")
        B = k.beta_at(X, Y)
        P = k.pi_at(X, Y)
        if not (np.all(np.isfinite(B)) and np.all(np.isfinite(P))):
            fail("finite", x=x)
            continue
        if np.max(np.abs(B - B.T), initial=0.0) > 1e-12 * (1.0 + np.max(np.abs(B))):
            fail("beta_symmetric", x=x)
        d = np.diag(B)
        if np.any(d < -tol):
            fail("beta_diagonal", x=x[d < -tol], value=d[d < -tol])
        if np.any(P < -tol):
            fail("pi_nonnegative", x=x)
        pd = k.pi_at(x, x)
        if np.any(np.abs(pd) > tol):
            fail("pi_diagonal", x=x[np.abs(pd) > tol], value=pd[np.abs(pd) > tol])
        A = B + np.diag((P * c[None, :]).sum(axis=1) / c)
        lam = float(np.linalg.eigvalsh(0.5 * (A + A.T))[0])
        if lam < -tol:
            fail("psd", x=x, c=c, min_eigenvalue=lam)
    return AdmissibilityReport(not failures, n_samples, failures)


# --- discrete-maturity scheme ------------------------------------------------


@dataclass(frozen=True)
class DiscreteHJMConfig:
    T: int
    gamma: float = 0.0

    def __post_init__(self):
        if int(self.T) != self.T or self.T < 1:
            raise ValidationError("T must be an integer >= 1")
        if not (0.0 <= self.gamma <= 1.0):
            # gamma > 1 would make (I + beta) mu negative at node 0
            raise ValidationError("gamma must lie in [0, 1]")


def build_beta_matrix(cfg: DiscreteHJMConfig) -> np.ndarray:
    """Drift matrix of mu_t - mu_{t-1} = beta mu_{t-1} + martingale increment."""
    n = int(cfg.T) + 1
    beta = np.zeros((n, n))
    beta[0, 0] = -cfg.gamma
    idx = np.arange(1, n)
    beta[idx, idx] = -1.0
    beta[idx - 1, idx] = 1.0
    return beta
