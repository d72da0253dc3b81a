"""Command-line entry point.

Runs are driven by a TOML config (see docs/config.md); any key can be
overridden on the command line as ``--section.key=value`` (``--key=value``
for top-level keys).  Exit codes: 0 success, 1 validation error, 2 numerical
failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .calibrate import (
    DAY_AHEAD_2022_03_22,
    DEFAULT_EXERCISE,
    DEFAULT_TAU1,
    DEFAULT_TAU2,
    CalibrationConfig,
    calibrate,
    init_neural_alpha,
    load_market_csv,
)
from .contracts import FutureContract, OptionSpec
from .errors import NumericalError, ParseError, ValidationError
from .measures import DiscreteMeasure, TestFunction, load_forward_curve
from .models import (
    BSKernels,
    DiscreteHJMConfig,
    PiecewiseLinearAlpha,
    check_admissibility,
    load_alpha,
    save_alpha,
)
from .moments import first_moment, particle_moment_bs, second_moment_affine
from .riccati import FourierConfig, fourier_prices
from .simulate import (
    PathGrid,
    discrete_hjm_paths,
    martingale_drift_test_batch,
    simulate_affine_paths,
    simulate_bs_paths,
)

log = logging.getLogger("mvhjm")

COMMANDS = ("price", "simulate", "moments", "calibrate", "check-drift", "check-admissibility")

FIXTURE_DAY_AHEAD = DAY_AHEAD_2022_03_22


def _fixture(name: str) -> Path:
    return Path(str(resources.files("mvhjm") / "data" / name))


# --- config -------------------------------------------------------------------


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ParseError(f"config {path}: {exc}") from exc


def _parse_value(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_overrides(cfg: dict, overrides) -> dict:
    """Apply ``--section.key=value`` strings to a nested config dict."""
    for item in overrides:
        if not item.startswith("--") or "=" not in item:
            raise ValidationError(f"override must look like --section.key=value, got {item!r}")
        key, value = item[2:].split("=", 1)
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(f"{key}: {p} is not a section")
        node[parts[-1]] = _parse_value(value)
    return cfg


def _section(cfg, name) -> dict:
    s = cfg.get(name, {})
    if not isinstance(s, dict):
        raise ValidationError(f"[{name}] must be a table")
    return s


def _threads(cfg):
    t = int(cfg.get("threads", 0))
    return t if t > 0 else (os.cpu_count() or 1)


def _contract(cfg) -> FutureContract:
    c = _section(cfg, "contract")
    if str(c.get("weight", "uniform")) != "uniform":
        raise ValidationError("contract.weight: only 'uniform' is supported from config files")
    return FutureContract(float(c.get("tau1", DEFAULT_TAU1)), float(c.get("tau2", DEFAULT_TAU2)))


def _forward_curve(cfg, min_horizon: float = 0.0) -> DiscreteMeasure:
    io = _section(cfg, "io")
    if "forward_curve" in io:
        path = Path(io["forward_curve"])
        day_ahead = float(io.get("day_ahead", 1.0))
    else:
        path = _fixture("forward_curve.csv")
        day_ahead = float(io.get("day_ahead", FIXTURE_DAY_AHEAD))
    if not path.exists():
        raise ValidationError(f"forward curve file not found: {path}")
    if not day_ahead > 0:
        raise ValidationError("io.day_ahead must be positive")
    mu = load_forward_curve(path, scale=day_ahead)
    horizon = max(mu.horizon, min_horizon, float(io.get("horizon", 0.0)))
    return DiscreteMeasure(mu.x, mu.w, horizon)


def _alpha(cfg, horizon):
    m = _section(cfg, "model")
    if "alpha_file" in m:
        return load_alpha(m["alpha_file"], horizon)
    if "alpha_grid" in m or "alpha_values" in m:
        return PiecewiseLinearAlpha(m["alpha_grid"], m["alpha_values"])
    return PiecewiseLinearAlpha.constant(float(m.get("alpha", 0.05)), horizon)


def _kernels(cfg, horizon) -> BSKernels:
    m = _section(cfg, "model")
    b = float(m.get("beta", 0.3))
    p = float(m.get("pi", 0.0))
    ell = m.get("beta_lengthscale")
    if ell is None:
        return BSKernels.constant(b, p, horizon)
    ell = float(ell)
    k0 = BSKernels.constant(b, p, horizon)
    return BSKernels(lambda x, y: b * np.exp(-((x - y) / ell) ** 2), k0.pi, horizon)


def _model_type(cfg) -> str:
    t = str(_section(cfg, "model").get("type", "affine")).lower()
    if t not in ("affine", "bs", "discrete"):
        raise ValidationError(f"model.type must be affine, bs or discrete; got {t!r}")
    return t


def _fourier(cfg) -> FourierConfig:
    f = _section(cfg, "fourier")
    damping = float(_section(cfg, "contract").get("damping", 1.0))
    return FourierConfig.symmetric(float(f.get("lambda_max", 100.0)), int(f.get("n_lambda", 4001)), damping)


def _output(cfg, default: str) -> Path:
    out = Path(_section(cfg, "io").get("output", "."))
    if out.suffix:
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    out.mkdir(parents=True, exist_ok=True)
    return out / default


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _test_function(choice, horizon) -> TestFunction:
    named = {
        "quadratic": TestFunction.polynomial([0.0, 0.0, 1.0]),
        "cosine": TestFunction(lambda x: np.cos(np.pi * np.asarray(x) / horizon),
                               lambda x: -np.pi / horizon * np.sin(np.pi * np.asarray(x) / horizon)),
        "gaussian": TestFunction(lambda x: np.exp(-np.asarray(x) ** 2),
                                 lambda x: -2.0 * np.asarray(x) * np.exp(-np.asarray(x) ** 2)),
        "constant": TestFunction.constant(1.0),
    }
    if isinstance(choice, str):
        if choice not in named:
            raise ValidationError(f"unknown test function {choice!r}; choose from {sorted(named)} or give coefficients")
        return named[choice]
    return TestFunction.polynomial([float(c) for c in choice])


# --- commands -------------------------------------------------------------------


def cmd_price(cfg) -> int:
    if _model_type(cfg) != "affine":
        raise ValidationError("price requires model.type = 'affine'")
    c = _contract(cfg)
    mu0 = _forward_curve(cfg, c.tau2)
    a = _alpha(cfg, mu0.horizon)
    con = _section(cfg, "contract")
    strikes = np.asarray(con.get("strikes", np.linspace(0.9, 1.1, 10)), dtype=float)
    tau = float(con.get("tau", DEFAULT_EXERCISE))
    f = _fourier(cfg)
    OptionSpec(0.0, tau, f.damping).check_contract(c)
    damping = -abs(f.damping) if con.get("put", False) else f.damping
    prices = fourier_prices(mu0, c, strikes, tau, a, f, damping)
    path = _output(cfg, "prices.csv")
    _write_csv(path, ["strike", "price"], zip(strikes, prices))
    log.info("wrote %s", path)
    return 0


def _grid(cfg, horizon) -> PathGrid:
    s = _section(cfg, "simulate")
    grid = PathGrid.uniform(float(s.get("t_end", min(0.1, horizon))), int(s.get("n_steps", 10)))
    grid.check(horizon)
    return grid


def _simulate_batch(cfg, section="simulate"):
    s = _section(cfg, section)
    n_paths = int(s.get("n_paths", 10))
    seed = int(cfg.get("seed", 0))
    mu0 = _forward_curve(cfg)
    kind = _model_type(cfg)
    sub = {**cfg, "simulate": s}
    grid = _grid(sub, mu0.horizon)
    if kind == "affine":
        return simulate_affine_paths(mu0, grid, _alpha(cfg, mu0.horizon), n_paths, seed, _threads(cfg)), mu0
    if kind == "bs":
        return simulate_bs_paths(mu0, grid, _kernels(cfg, mu0.horizon), n_paths, seed, _threads(cfg)), mu0
    raise ValidationError("use model.type affine or bs here")


def cmd_simulate(cfg) -> int:
    out = Path(_section(cfg, "io").get("output", "paths"))
    out.mkdir(parents=True, exist_ok=True)
    if _model_type(cfg) == "discrete":
        m = _section(cfg, "model")
        dcfg = DiscreteHJMConfig(int(m.get("T", 12)), float(m.get("gamma", 0.0)))
        mu0 = np.asarray(m.get("mu0", np.ones(dcfg.T + 1)), dtype=float)
        steps = int(_section(cfg, "simulate").get("n_steps", dcfg.T))
        alpha = float(m.get("alpha", 0.05))
        paths = discrete_hjm_paths(mu0, steps, dcfg, lambda i: alpha,
                                   int(_section(cfg, "simulate").get("n_paths", 10)), int(cfg.get("seed", 0)),
                                   _threads(cfg))
        for p, path in enumerate(paths):
            rows = [(t, i, path[t, i]) for t in range(path.shape[0]) for i in range(path.shape[1])]
            _write_csv(out / f"path_{p:05d}.csv", ["t", "x", "weight"], rows)
        return 0
    batch, _ = _simulate_batch(cfg)
    for p in range(batch.n_paths):
        rows = [(t, x, w) for k, t in enumerate(batch.grid.times)
                for x, w in zip(batch.positions[k], batch.weights[p, k])]
        _write_csv(out / f"path_{p:05d}.csv", ["t", "x", "weight"], rows)
    log.info("wrote %d paths to %s", batch.n_paths, out)
    return 0


def read_path_csv(path):
    """Inverse of the ``simulate`` output: list of (t, x array, weight array)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip() for c in rows[0]] != ["t", "x", "weight"]:
        raise ParseError(f"{path}: header must be 't,x,weight'")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, 3)
    times = np.unique(data[:, 0])
    return [(t, data[data[:, 0] == t, 1], data[data[:, 0] == t, 2]) for t in times]


def cmd_moments(cfg) -> int:
    s = _section(cfg, "moments")
    m = int(s.get("order", 2))
    t = float(s.get("t", 0.05))
    n_paths = int(s.get("n_paths", 100_000))
    seed = int(cfg.get("seed", 0))
    mu0 = _forward_curve(cfg)
    g = _test_function(s.get("test_function", [1.0]), mu0.horizon)
    rows = []
    kind = _model_type(cfg)
    if kind == "affine":
        a = _alpha(cfg, mu0.horizon)
        if m == 1:
            rows.append(("moment_1_exact", first_moment(mu0, g, t), 0.0))
        elif m == 2:
            rows.append(("moment_2_exact", second_moment_affine(mu0, g, a, t), 0.0))
        batch = simulate_affine_paths(mu0, PathGrid(np.array([0.0, t])), a, n_paths, seed, _threads(cfg))
        vals = batch.pair(g.value)[:, -1] ** m
        rows.append((f"moment_{m}_mc", vals.mean(), vals.std(ddof=1) / np.sqrt(vals.size)))
    elif kind == "bs":
        est, se = particle_moment_bs(mu0, g, m, t, _kernels(cfg, mu0.horizon), n_paths, seed, _threads(cfg))
        rows.append((f"moment_{m}_particle", est, se))
    else:
        raise ValidationError("moments supports model.type affine or bs")
    path = _output(cfg, "moments.csv")
    _write_csv(path, ["quantity", "estimate", "std_error"], rows)
    return 0


def cmd_check_drift(cfg) -> int:
    s = _section(cfg, "drift")
    sim = {"n_paths": s.get("n_paths", 10_000), "n_steps": s.get("n_steps", 100), "t_end": s.get("t_end", 0.1)}
    batch, mu0 = _simulate_batch({**cfg, "drift_sim": sim}, "drift_sim")
    names = s.get("test_functions", ["quadratic", "cosine", "gaussian"])
    threshold = float(s.get("threshold", 4.0))
    gamma = float(_section(cfg, "model").get("gamma", 0.0))
    reports = {}
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for name in names:
            key = name if isinstance(name, str) else "poly" + str(list(name))
            reports[key] = martingale_drift_test_batch(batch, _test_function(name, mu0.horizon), gamma,
                                                       threshold).to_dict()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = {"pass": all(r["pass"] for r in reports.values()), "tests": reports}
    path = _output(cfg, "drift_report.json")
    path.write_text(json.dumps(out, indent=2))
    return 0


def cmd_check_admissibility(cfg) -> int:
    s = _section(cfg, "admissibility")
    mu_h = float(_section(cfg, "io").get("horizon", 1.0))
    k = _kernels(cfg, mu_h)
    rep = check_admissibility(k, int(s.get("n_samples", 200)), int(cfg.get("seed", 0)),
                              int(s.get("max_points", 8)))
    path = _output(cfg, "admissibility_report.json")
    path.write_text(json.dumps(rep.to_dict(), indent=2))
    return 0


def emit_figures(report: dict, outdir) -> list:
    """Write ``fit.csv`` and ``errors.csv`` from a calibration report.

    An empty report writes nothing and warns.
    """
    strikes = report.get("strike", []) if report else []
    if len(strikes) == 0:
        warnings.warn("empty calibration report; no figure data written", RuntimeWarning, stacklevel=2)
        return []
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    fit, err = outdir / "fit.csv", outdir / "errors.csv"
    _write_csv(fit, ["strike", "market", "model"], zip(strikes, report["market"], report["model"]))
    _write_csv(err, ["strike", "abs", "rel", "sq"], zip(strikes, report["abs"], report["rel"], report["sq"]))
    return [fit, err]


def cmd_calibrate(cfg) -> int:
    io = _section(cfg, "io")
    s = _section(cfg, "calibrate")
    con = _section(cfg, "contract")
    if "forward_curve" in io:
        curve, quotes = Path(io["forward_curve"]), Path(io.get("quotes", ""))
        day_ahead = float(io.get("day_ahead", 1.0))
    else:
        curve, quotes = _fixture("forward_curve.csv"), Path(io.get("quotes", _fixture("quotes.csv")))
        day_ahead = float(io.get("day_ahead", FIXTURE_DAY_AHEAD))
    for p in (curve, quotes):
        if not p.is_file():
            raise ValidationError(f"input file not found: {p}")
    d = load_market_csv(curve, quotes, day_ahead, _contract(cfg),
                            float(con.get("tau", DEFAULT_EXERCISE)))
    H = d.forward_curve.horizon
    arch = str(s.get("architecture", "neural"))
    if arch == "neural":
        init = init_neural_alpha(H, float(s.get("alpha0", 0.07)), int(s.get("width", 32)),
                                     int(cfg.get("seed", 0)), int(s.get("pretrain_steps", 100)),
                                     output_scale=float(s.get("output_scale", 0.01)))
    elif arch == "grid":
        n = int(s.get("grid_points", 6))
        init = PiecewiseLinearAlpha(np.linspace(0.0, H, n), np.full(n, float(s.get("alpha0", 0.07))))
    else:
        raise ValidationError("calibrate.architecture must be 'neural' or 'grid'")
    clip = s.get("clip_norm")
    ccfg = CalibrationConfig(float(s.get("learning_rate", 0.01)), int(s.get("max_iters", 300)),
                                 str(s.get("grad_mode", "backprop")), float(s.get("fd_step", 1e-4)),
                                 _fourier(cfg), int(cfg.get("seed", 0)), None if clip is None else float(clip))
    res = calibrate(d, init, ccfg)
    out = Path(io.get("output", "calibration"))
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration_report.json").write_text(json.dumps(res.report, indent=2))
    save_alpha(res.alpha, out / "alpha_fitted.json")
    emit_figures(res.report, out)
    print(f"final loss {res.loss_trace[-1]:.6g}, mean abs error {res.report['mean_abs']:.3g}")
    return 0


HANDLERS = {
    "price": cmd_price,
    "simulate": cmd_simulate,
    "moments": cmd_moments,
    "calibrate": cmd_calibrate,
    "check-drift": cmd_check_drift,
    "check-admissibility": cmd_check_admissibility,
}


def execute(cfg: dict) -> int:
    """Run ``cfg['command']``; maps library errors onto exit codes."""
    try:
        command = cfg.get("command")
        if command not in HANDLERS:
            raise ValidationError(f"command must be one of {', '.join(COMMANDS)}; got {command!r}")
        return HANDLERS[command](cfg)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


def run(config_path, overrides=()) -> int:
    try:
        cfg = apply_overrides(load_config(config_path), overrides)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return execute(cfg)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvhjm", description="Measure-valued HJM models for energy futures.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the command named in a config file")
    r.add_argument("config")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("-c", "--config", help="TOML config file")
        if name == "moments":
            sp.add_argument("--order", type=int)
            sp.add_argument("--t", type=float)
            sp.add_argument("--model", choices=["affine", "bs"])
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args, overrides = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_config(args.config) if getattr(args, "config", None) else {}
        if args.command != "run":
            cfg["command"] = args.command
        if args.command == "moments":
            for key, val in (("order", args.order), ("t", args.t)):
                if val is not None:
                    cfg.setdefault("moments", {})[key] = val
            if args.model is not None:
                cfg.setdefault("model", {})["type"] = args.model
        apply_overrides(cfg, overrides)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return execute(cfg)


if __name__ == "__main__":
    sys.exit(main())
