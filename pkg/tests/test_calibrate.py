import numpy as np
import pytest

from mvhjm.calibrate import (
    DAY_AHEAD_2022_03_22,
    CalibrationConfig,
    MarketDataset,
    calibrate,
    error_report,
    init_neural_alpha,
    l1_loss,
    load_market_csv,
    loss_and_grad,
    price_vector,
    reference_alpha,
    write_synthetic_market,
)
from mvhjm.contracts import FutureContract, future_price
from mvhjm.errors import DataError, DivergenceError, ParseError, ShapeError, ValidationError
from mvhjm.models import MLPAlpha, NeuralAlpha, PiecewiseLinearAlpha
from mvhjm.riccati import FourierConfig

WIDE = FourierConfig.symmetric(2000.0, 200_001)


@pytest.fixture(scope="module")
def market(tmp_path_factory):
    d = tmp_path_factory.mktemp("market")
    curve, quotes = write_synthetic_market(d)
    return load_market_csv(curve, quotes, DAY_AHEAD_2022_03_22)


def write(path, text):
    path.write_text(text)
    return path


def test_loader_flat_curve(tmp_path):
    rows = ["date,value"] + [f"2022-{3 + (21 + i) // 31:02d}-{(21 + i) % 31 + 1:02d},236.49" for i in range(10)]
    curve = write(tmp_path / "c.csv", "\n".join(rows))
    quotes = write(tmp_path / "q.csv", "strike,price\n0.9,0.1\n1.0,0.05\n")
    d = load_market_csv(curve, quotes, 236.49)
    assert np.allclose(d.forward_curve.w * 365, 1.0)
    assert np.allclose(d.strikes, [0.9, 1.0]) and not d.notes
    assert np.allclose(d.prices, np.array([0.1, 0.05]) / 236.49)


def test_loader_fixture_shape(market):
    assert len(market.forward_curve) == 71
    assert market.strikes.size == 10
    assert market.strikes[0] == pytest.approx(0.9) and market.strikes[-1] == pytest.approx(1.1)
    assert market.notes  # strikes were given in currency units
    assert market.forward_curve.w[0] * 365 == pytest.approx(1.0, abs=0.02)


def test_loader_errors(tmp_path, market):
    curve = write(tmp_path / "c.csv", "x,weight\n0.0,0.1\n0.2,0.1\n")
    with pytest.raises(DataError):
        load_market_csv(curve, write(tmp_path / "e.csv", "strike,price\n"), 1.0)
    with pytest.raises(DataError):
        load_market_csv(curve, write(tmp_path / "n.csv", "strike,price\n1.0,-0.1\n"), 1.0)
    with pytest.raises(ParseError):
        load_market_csv(curve, write(tmp_path / "m.csv", "strike,price\n1.0,abc\n"), 1.0)
    with pytest.raises(ParseError):
        load_market_csv(curve, write(tmp_path / "h.csv", "k,p\n1.0,0.1\n"), 1.0)
    with pytest.raises(DataError):
        load_market_csv(curve, write(tmp_path / "ok.csv", "strike,price\n1.0,0.1\n"), 0.0)


def test_config_validation():
    with pytest.raises(ValidationError):
        CalibrationConfig(learning_rate=0.0)
    with pytest.raises(ValidationError):
        CalibrationConfig(max_iters=0)
    with pytest.raises(ValidationError):
        CalibrationConfig(grad_mode="adam")


def test_price_vector_examples(market):
    F = future_price(market.forward_curve, 0.0, market.contract)
    zero = PiecewiseLinearAlpha.constant(0.0, market.forward_curve.horizon)
    p = price_vector(zero, market, WIDE)
    assert np.allclose(p, np.maximum(F - market.strikes, 0.0), atol=1e-4)
    ref = reference_alpha(market.forward_curve.horizon)
    with_zero = MarketDataset(market.quote_date, 1.0, market.forward_curve, np.r_[0.0, market.strikes],
                              np.r_[F, market.prices], market.contract, market.tau)
    pz = price_vector(ref, with_zero, CalibrationConfig())
    assert pz[0] == pytest.approx(F, rel=1e-4)
    assert np.all(np.diff(pz) <= 0)


def test_l1_loss_examples():
    assert l1_loss([0.1, 0.2], [0.1, 0.2]) == 0.0
    assert l1_loss([0.1, 0.2], [0.1, 0.21]) == pytest.approx(0.01)
    assert l1_loss(np.full(10, 0.00096), np.zeros(10)) == pytest.approx(0.0096)
    with pytest.raises(ShapeError):
        l1_loss([0.1], [0.1, 0.2])


def test_error_report_format():
    market = np.linspace(0.12, 0.05, 10)
    rep = error_report(np.linspace(0.9, 1.1, 10), market, market + 0.00096)
    assert rep["mean_abs"] == pytest.approx(0.00096)
    assert rep["mean_sq"] == pytest.approx(0.00096 ** 2)
    assert set(rep) >= {"strike", "abs", "rel", "sq", "mean_abs", "mean_rel", "mean_sq"}
    assert len(rep["abs"]) == 10


def test_zero_variance_target_is_already_optimal(market):
    zero = PiecewiseLinearAlpha.constant(0.0, market.forward_curve.horizon)
    F = future_price(market.forward_curve, 0.0, market.contract)
    d = MarketDataset(None, 1.0, market.forward_curve, market.strikes, np.maximum(F - market.strikes, 0.0),
                      market.contract, market.tau)
    res = calibrate(d, zero, CalibrationConfig(max_iters=1, fourier=WIDE))
    assert res.loss_trace[0] < 1e-3  # Fourier truncation error only
    exact = MarketDataset(None, 1.0, market.forward_curve, market.strikes, price_vector(zero, d, WIDE),
                          market.contract, market.tau)
    res = calibrate(exact, zero, CalibrationConfig(max_iters=5, fourier=WIDE))
    assert res.loss_trace == [0.0]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_backprop_matches_finite_differences(market, seed):
    H = market.forward_curve.horizon
    a = NeuralAlpha(MLPAlpha.init(4, 0.06, seed=seed, output_scale=0.1), H, n_simpson=512)
    # offset quotes so every residual keeps its sign under the h = 1e-4 perturbation
    d = MarketDataset(None, 1.0, market.forward_curve, market.strikes, market.prices + 0.01, market.contract,
                      market.tau)
    _, g_bp, _ = loss_and_grad(a, d, CalibrationConfig(grad_mode="backprop"))
    _, g_fd, _ = loss_and_grad(a, d, CalibrationConfig(grad_mode="fd", fd_step=1e-4))
    # relu pre-activations on a few quadrature nodes cross zero within +-1e-4, so
    # single entries carry finite-difference error; the vector agrees to 1e-4
    assert np.linalg.norm(g_bp - g_fd) <= 1e-4 * np.linalg.norm(g_fd)
    _, g_fine, _ = loss_and_grad(a, d, CalibrationConfig(grad_mode="fd", fd_step=1e-5))
    big = np.abs(g_fine) > 1e-6 * np.max(np.abs(g_fine))
    assert np.allclose(g_bp[big], g_fine[big], rtol=1e-4)


def test_calibration_deterministic_and_non_negative(market):
    H = market.forward_curve.horizon
    cfg = CalibrationConfig(max_iters=20)
    r1 = calibrate(market, init_neural_alpha(H, 0.07, width=8, seed=3), cfg)
    r2 = calibrate(market, init_neural_alpha(H, 0.07, width=8, seed=3), cfg)
    assert r1.loss_trace == r2.loss_trace
    assert np.all(np.isfinite(r1.loss_trace))
    assert np.all(r1.alpha(np.random.default_rng(0).uniform(0, H, 10_000)) >= 0)
    assert r1.loss_trace[-1] < r1.loss_trace[0]


def test_grid_calibration_improves(market):
    H = market.forward_curve.horizon
    init = PiecewiseLinearAlpha(np.linspace(0, H, 4), np.full(4, 0.07))
    res = calibrate(market, init, CalibrationConfig(learning_rate=0.001, max_iters=30, clip_norm=10.0))
    assert min(res.loss_trace) < res.loss_trace[0]
    assert np.all(res.alpha.params() >= 0)


def test_divergence_error(market):
    d = MarketDataset(None, 1.0, market.forward_curve, market.strikes, np.full(10, np.nan), market.contract,
                      market.tau)
    with pytest.raises(DivergenceError):
        calibrate(d, PiecewiseLinearAlpha.constant(0.05, market.forward_curve.horizon), CalibrationConfig(max_iters=2))


def test_negative_init_rejected(market):
    class Neg(PiecewiseLinearAlpha):
        def __call__(self, x):
            return -np.ones(np.shape(x))

    with pytest.raises(ValidationError):
        calibrate(market, Neg([0.0, 1.0], [0.0, 0.0]), CalibrationConfig(max_iters=1))
