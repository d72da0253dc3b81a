"""Calibration of the affine branching rate alpha to call quotes.

The objective is the L1 distance ``sum_K |market(K) - model(K)|`` between
market quotes and Fourier model prices, minimised by fixed-rate gradient
descent.
"""
from __future__ import annotations

import csv
import datetime as _dt
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .contracts import FutureContract
from .errors import DataError, DivergenceError, ParseError, ShapeError, ValidationError
from .measures import DiscreteMeasure, load_forward_curve
from .models import AlphaFunction, MLPAlpha, NeuralAlpha
from .riccati import FourierConfig, fourier_prices, fourier_prices_with_grad

log = logging.getLogger(__name__)

DAY_AHEAD_2022_03_22 = 236.49
DEFAULT_TAU1 = 1.33 / 12
DEFAULT_TAU2 = 2.33 / 12
DEFAULT_EXERCISE = 35 / 365  # 2022-03-22 -> 2022-04-26


@dataclass
class MarketDataset:
    quote_date: Optional[_dt.date]
    day_ahead_price: float
    forward_curve: DiscreteMeasure
    strikes: np.ndarray
    prices: np.ndarray
    contract: FutureContract
    tau: float
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.strikes = np.asarray(self.strikes, dtype=float)
        self.prices = np.asarray(self.prices, dtype=float)
        if self.day_ahead_price <= 0:
            raise DataError("normalisation divisor must be positive")
        if self.strikes.shape != self.prices.shape or self.strikes.size == 0:
            raise DataError("need at least one quote")
        if np.any(np.diff(self.strikes) <= 0):
            raise DataError("strikes must be strictly ascending")
        if np.any(self.prices < 0):
            raise DataError("quote prices must be non-negative")


@dataclass
class CalibrationConfig:
    learning_rate: float = 0.01
    max_iters: int = 300
    grad_mode: str = "backprop"  # or "fd"
    fd_step: float = 1e-4
    fourier: FourierConfig = field(default_factory=FourierConfig)
    seed: int = 0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.grad_mode not in ("backprop", "fd"):
            raise ValidationError("grad_mode must be 'backprop' or 'fd'")


@dataclass
class CalibrationResult:
    alpha: AlphaFunction
    loss_trace: list
    report: dict


def _read_quotes(path):
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    if not rows or [c.strip().lower() for c in rows[0][:2]] != ["strike", "price"]:
        raise ParseError(f"{path}: header must be 'strike,price'")
    try:
        data = np.array([[float(r[0]), float(r[1])] for r in rows[1:]]).reshape(-1, 2)
    except (ValueError, IndexError) as exc:
        raise ParseError(f"{path}: malformed row ({exc})") from exc
    if data.shape[0] == 0:
        raise DataError(f"{path}: no quotes")
    return data[:, 0], data[:, 1]


def _first_date(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows and rows[0][0].strip().lower() == "date" and len(rows) > 1:
        return _dt.date.fromisoformat(rows[1][0].strip())
    return None


def load_market_csv(path_curve, path_quotes, day_ahead: float, contract: FutureContract | None = None,
                    tau: float = DEFAULT_EXERCISE) -> MarketDataset:
    """Read curve and quotes and normalise everything by the day-ahead price.

    Strikes above 2 are taken to be in currency units and divided as well;
    this is recorded in ``notes``.
    """
    if not day_ahead > 0:
        raise DataError("day_ahead must be positive")
    contract = contract or FutureContract(DEFAULT_TAU1, DEFAULT_TAU2)
    curve = load_forward_curve(path_curve, scale=day_ahead)
    if np.any(curve.w < 0):
        raise DataError("negative forward values")
    horizon = max(curve.horizon, contract.tau2)
    curve = DiscreteMeasure(curve.x, curve.w, horizon)
    strikes, prices = _read_quotes(path_quotes)
    if np.any(prices < 0):
        raise DataError("negative option prices")
    notes = []
    if np.max(strikes) > 2:
        strikes = strikes / day_ahead
        notes.append("strikes > 2 detected; divided by the day-ahead price")
    prices = prices / day_ahead
    order = np.argsort(strikes)
    return MarketDataset(_first_date(path_curve), day_ahead, curve, strikes[order], prices[order], contract, tau,
                         notes)


def price_vector(a: AlphaFunction, d: MarketDataset, cfg: CalibrationConfig | FourierConfig) -> np.ndarray:
    f = cfg.fourier if isinstance(cfg, CalibrationConfig) else cfg
    return fourier_prices(d.forward_curve, d.contract, d.strikes, d.tau, a, f)


def l1_loss(model_prices, market_prices) -> float:
    model_prices = np.asarray(model_prices, dtype=float)
    market_prices = np.asarray(market_prices, dtype=float)
    if model_prices.shape != market_prices.shape:
        raise ShapeError(f"shape mismatch {model_prices.shape} vs {market_prices.shape}")
    return float(np.sum(np.abs(market_prices - model_prices)))


def error_report(strikes, market, model) -> dict:
    """Per-strike absolute, relative and squared errors and their means."""
    strikes, market, model = (np.asarray(v, dtype=float) for v in (strikes, market, model))
    abs_err = np.abs(market - model)
    with np.errstate(divide="ignore", invalid="ignore"):
        rel_err = np.where(market != 0, abs_err / np.abs(market), np.where(abs_err == 0, 0.0, np.inf))
    sq_err = abs_err ** 2
    return {
        "strike": strikes.tolist(),
        "market": market.tolist(),
        "model": model.tolist(),
        "abs": abs_err.tolist(),
        "rel": rel_err.tolist(),
        "sq": sq_err.tolist(),
        "mean_abs": float(abs_err.mean()) if abs_err.size else 0.0,
        "mean_rel": float(rel_err.mean()) if rel_err.size else 0.0,
        "mean_sq": float(sq_err.mean()) if sq_err.size else 0.0,
    }


def loss_and_grad(a: AlphaFunction, d: MarketDataset, cfg: CalibrationConfig):
    """L1 loss, its (sub)gradient w.r.t. ``a.params()``, and the model prices."""
    if cfg.grad_mode == "backprop":
        prices, jac = fourier_prices_with_grad(d.forward_curve, d.contract, d.strikes, d.tau, a, cfg.fourier)
        loss = l1_loss(prices, d.prices)
        return loss, np.sign(prices - d.prices) @ jac, prices
    prices = price_vector(a, d, cfg)
    loss = l1_loss(prices, d.prices)
    p0 = a.params()
    grad = np.empty_like(p0)
    h = cfg.fd_step
    for i in range(p0.size):
        up, dn = p0.copy(), p0.copy()
        up[i] += h
        dn[i] -= h
        lp = l1_loss(price_vector(a.with_params(up), d, cfg), d.prices)
        lm = l1_loss(price_vector(a.with_params(dn), d, cfg), d.prices)
        grad[i] = (lp - lm) / (2 * h)
    return loss, grad, prices


def calibrate(d: MarketDataset, init: AlphaFunction, cfg: CalibrationConfig = CalibrationConfig(),
              callback=None) -> CalibrationResult:
    """Fixed-rate gradient descent on the L1 pricing error.

    Returns the final iterate, the loss trace (one entry per evaluated
    iterate, the last one being the returned alpha) and an error report.
    """
    if np.any(init(np.linspace(0.0, init.horizon, 257)) < 0):
        raise ValidationError("initial alpha must be non-negative")
    a = init
    trace = []
    for it in range(cfg.max_iters + 1):
        loss, grad, prices = loss_and_grad(a, d, cfg)
        if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
            raise DivergenceError(f"non-finite loss at iteration {it}; try a different initialisation")
        trace.append(loss)
        if callback is not None:
            callback(it, loss, a)
        if it == cfg.max_iters or loss == 0.0:
            break
        if cfg.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.clip_norm:
                grad = grad * (cfg.clip_norm / norm)
        a = a.with_params(a.project(a.params() - cfg.learning_rate * grad))
    report = error_report(d.strikes, d.prices, prices)
    report.update(iterations=len(trace) - 1, final_loss=trace[-1], loss_trace=trace, notes=list(d.notes))
    log.info("calibration finished: loss %.3g after %d iterations", trace[-1], len(trace) - 1)
    return CalibrationResult(a, trace, report)


def init_neural_alpha(horizon: float, alpha0: float, width: int = 32, seed: int = 0, pretrain_steps: int = 100,
                      pretrain_lr: float = 0.05, output_scale: float = 0.01) -> NeuralAlpha:
    """Network started near the constant ``alpha0`` and pre-fitted to it.

    Pre-fitting runs ``pretrain_steps`` gradient steps on the mean squared
    distance between alpha on the quadrature nodes and ``alpha0``.
    """
    a = NeuralAlpha(MLPAlpha.init(width, alpha0, seed, output_scale), horizon)
    for _ in range(pretrain_steps):
        resid = a._node_vals - alpha0
        g = a.node_vjp(2.0 * resid / resid.size)
        a = a.with_params(a.params() - pretrain_lr * g)
    return a


# --- synthetic fixture -------------------------------------------------------


def synthetic_curve(day_ahead: float = DAY_AHEAD_2022_03_22, n_days: int = 71, seed: int = 7):
    """Daily forward values shaped like a spring power curve, in currency units."""
    rng = np.random.default_rng(seed)
    k = np.arange(n_days)
    level = day_ahead * (1.0 - 0.08 * k / n_days + 0.03 * np.sin(2 * np.pi * k / 7.0))
    return level * (1.0 + 0.005 * rng.standard_normal(n_days))


def reference_alpha(horizon: float) -> AlphaFunction:
    """Branching rate used to generate the synthetic quotes."""
    from .models import PiecewiseLinearAlpha

    grid = np.linspace(0.0, horizon, 6)
    return PiecewiseLinearAlpha(grid, [0.09, 0.08, 0.07, 0.075, 0.06, 0.05])


def write_synthetic_market(outdir, day_ahead: float = DAY_AHEAD_2022_03_22, n_strikes: int = 10,
                           fourier: FourierConfig = FourierConfig()) -> tuple[Path, Path]:
    """Write ``forward_curve.csv`` (date,value) and ``quotes.csv`` (strike,price).

    Quotes are model prices under :func:`reference_alpha`, expressed in
    currency units like exchange data.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    values = synthetic_curve(day_ahead)
    start = _dt.date(2022, 3, 22)
    curve_path = outdir / "forward_curve.csv"
    with open(curve_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["date", "value"])
        for i, v in enumerate(values):
            wr.writerow([(start + _dt.timedelta(days=i)).isoformat(), f"{v:.6f}"])
    contract = FutureContract(DEFAULT_TAU1, DEFAULT_TAU2)
    mu0 = load_forward_curve(curve_path, scale=day_ahead)
    mu0 = DiscreteMeasure(mu0.x, mu0.w, max(mu0.horizon, contract.tau2))
    strikes = np.linspace(0.9, 1.1, n_strikes)
    prices = fourier_prices(mu0, contract, strikes, DEFAULT_EXERCISE, reference_alpha(mu0.horizon), fourier)
    quotes_path = outdir / "quotes.csv"
    with open(quotes_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["strike", "price"])
        for k_, p in zip(strikes, prices):
            wr.writerow([f"{k_ * day_ahead:.6f}", f"{p * day_ahead:.8f}"])
    return curve_path, quotes_path
