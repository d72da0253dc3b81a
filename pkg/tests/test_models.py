import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.integrate import quad

from mvhjm.errors import DomainError, ValidationError
from mvhjm.models import (
    BSKernels,
    DiscreteHJMConfig,
    MLPAlpha,
    NeuralAlpha,
    PiecewiseLinearAlpha,
    alpha_eval,
    alpha_transported_integral,
    build_beta_matrix,
    check_admissibility,
    load_alpha,
    save_alpha,
)

T = 1.0


def test_alpha_eval_examples():
    assert alpha_eval(PiecewiseLinearAlpha.constant(2.0, T), 0.37) == pytest.approx(2.0)
    assert alpha_eval(PiecewiseLinearAlpha([0.0, T], [0.0, 4.0]), T / 2) == pytest.approx(2.0)
    zero = MLPAlpha([(np.zeros((4, 1)), np.zeros(4), "tanh"), (np.zeros((4, 4)), np.zeros(4), "relu"),
                     (np.zeros((1, 4)), np.zeros(1), "relu")])
    assert alpha_eval(NeuralAlpha(zero, T), 0.3) == 0.0
    with pytest.raises(DomainError):
        alpha_eval(PiecewiseLinearAlpha.constant(2.0, T), 1.5)


def test_transported_integral_examples():
    a = PiecewiseLinearAlpha.constant(2.0, T)
    assert alpha_transported_integral(a, 0.5, 0.3) == pytest.approx(0.6)
    assert alpha_transported_integral(a, 0.5, 0.7) == pytest.approx(1.4)
    ref = quad(lambda s: 2.0, 0.0, 0.7)[0]
    assert alpha_transported_integral(a, 0.5, 0.7) == pytest.approx(ref)
    assert alpha_transported_integral(PiecewiseLinearAlpha.constant(0.0, T), 0.5, 0.7) == 0.0


def test_invalid_alpha():
    with pytest.raises(ValidationError):
        PiecewiseLinearAlpha([0.0, 1.0], [1.0, -1.0])
    with pytest.raises(ValidationError):
        PiecewiseLinearAlpha([0.1, 1.0], [1.0, 1.0])
    with pytest.raises(ValidationError):
        MLPAlpha([(np.ones((2, 1)), np.zeros(2), "relu")] * 3)


pl_values = st.lists(st.floats(0, 5), min_size=2, max_size=6)


@given(pl_values, st.floats(0, T), st.floats(0, T))
def test_transported_integral_matches_quadrature(vals, x, t):
    a = PiecewiseLinearAlpha(np.linspace(0, T, len(vals)), vals)
    s = np.linspace(0.0, t, 10_001)
    f = a(np.maximum(x - s, 0.0))
    trap = float(np.sum(0.5 * (f[1:] + f[:-1]) * np.diff(s)))
    assert alpha_transported_integral(a, x, t) == pytest.approx(trap, abs=1e-8 + 5e-8 * trap)


@given(pl_values, st.floats(0, T), st.floats(0, T), st.floats(0, T))
def test_transported_integral_monotone_in_t(vals, x, t1, t2):
    a = PiecewiseLinearAlpha(np.linspace(0, T, len(vals)), vals)
    lo, hi = sorted([t1, t2])
    assert alpha_transported_integral(a, x, lo) <= alpha_transported_integral(a, x, hi) + 1e-12


@given(pl_values, st.floats(0.01, T))
def test_transported_integral_continuous_at_kink(vals, x):
    a = PiecewiseLinearAlpha(np.linspace(0, T, len(vals)), vals)
    left = alpha_transported_integral(a, x, x - 1e-9)
    right = alpha_transported_integral(a, x, x + 1e-9)
    assert abs(left - right) < 1e-7


def test_mlp_output_non_negative():
    mlp = MLPAlpha.init(width=16, alpha0=0.05, seed=3)
    rng = np.random.default_rng(0)
    p = mlp.params()
    noisy = mlp.with_params(p + rng.normal(0, 1.0, p.size))
    out = noisy.forward(rng.uniform(-5, 5, 100_000))
    assert np.all(out >= 0.0)


def test_mlp_init_near_constant():
    a = NeuralAlpha(MLPAlpha.init(32, 0.07, seed=0, output_scale=0.01), T)
    vals = a(np.linspace(0, T, 101))
    assert np.all(vals >= 0)
    assert np.mean(vals) == pytest.approx(0.07, rel=0.05)


def test_neural_primitive_accuracy():
    a = NeuralAlpha(MLPAlpha.init(8, 0.5, seed=1), T)
    for x in [0.1, 0.5, 0.9]:
        ref = quad(lambda s: float(a(np.array([s]))[0]), 0.0, x, limit=200)[0]
        assert a.primitive(x) == pytest.approx(ref, abs=1e-7)


@pytest.mark.parametrize("kind", ["pl", "neural"])
def test_transported_integral_vjp(kind):
    rng = np.random.default_rng(4)
    if kind == "pl":
        a = PiecewiseLinearAlpha(np.linspace(0, T, 5), rng.uniform(0.5, 2, 5))
    else:
        a = NeuralAlpha(MLPAlpha.init(6, 0.5, seed=2), T, n_simpson=256)
    x = rng.uniform(0, T, 7)
    t = 0.3
    cot = rng.normal(size=7)
    g = a.transported_integral_vjp(x, t, cot)
    p = a.params()
    h = 1e-6
    fd = np.empty_like(p)
    for i in range(p.size):
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        fd[i] = (cot @ a.with_params(up).transported_integral(x, t) - cot @ a.with_params(dn).transported_integral(x, t)) / (2 * h)
    assert np.allclose(g, fd, rtol=1e-4, atol=1e-8)


def test_alpha_serialization(tmp_path):
    pl = PiecewiseLinearAlpha([0.0, 0.5, 1.0], [0.1, 0.3, 0.2])
    save_alpha(pl, tmp_path / "pl.json")
    back = load_alpha(tmp_path / "pl.json")
    assert np.allclose(back(np.linspace(0, 1, 11)), pl(np.linspace(0, 1, 11)))
    nn = NeuralAlpha(MLPAlpha.init(5, 0.2, seed=1, output_scale=0.5), T)
    save_alpha(nn, tmp_path / "nn.json")
    back = load_alpha(tmp_path / "nn.json")
    assert np.array_equal(back(np.linspace(0, 1, 11)), nn(np.linspace(0, 1, 11)))


def test_admissibility_examples():
    gauss = BSKernels(lambda x, y: np.exp(-(x - y) ** 2), lambda x, y: np.zeros(np.broadcast(x, y).shape), T)
    assert check_admissibility(gauss).passed
    rep = check_admissibility(BSKernels.constant(-1.0, 0.0, T))
    assert not rep.passed and rep.failures[0]["check"] == "beta_diagonal"
    diag_pi = BSKernels(lambda x, y: np.zeros(np.broadcast(x, y).shape),
                        lambda x, y: np.full(np.broadcast(x, y).shape, 0.1), T)
    rep = check_admissibility(diag_pi)
    assert not rep.passed and any(f["check"] == "pi_diagonal" for f in rep.failures)
    assert rep.to_dict()["pass"] is False


def test_admissibility_with_jumps():
    k = BSKernels(lambda x, y: 0.3 * np.exp(-(x - y) ** 2), lambda x, y: 0.8 * np.abs(x - y), T)
    assert check_admissibility(k, n_samples=300).passed


def test_beta_matrix_examples():
    assert np.array_equal(build_beta_matrix(DiscreteHJMConfig(2, 0.0)),
                          np.array([[0, 1, 0], [0, -1, 1], [0, 0, -1]], dtype=float))
    b = build_beta_matrix(DiscreteHJMConfig(2, 0.5))
    assert b[0, 0] == -0.5 and b[0, 1] == 1
    one = np.eye(3) + build_beta_matrix(DiscreteHJMConfig(2, 0.0))
    assert np.array_equal(one @ np.array([1.0, 2.0, 3.0]), np.array([3.0, 3.0, 0.0]))
    with pytest.raises(ValidationError):
        DiscreteHJMConfig(0)


@given(st.integers(1, 20), st.lists(st.floats(0, 10), min_size=21, max_size=21))
def test_beta_mass_conservation(T_, mu):
    mu = np.array(mu[: T_ + 1])
    nu = (np.eye(T_ + 1) + build_beta_matrix(DiscreteHJMConfig(T_, 0.0))) @ mu
    # each node hands its mass one step towards 0; node 0 keeps its own
    assert nu.sum() == pytest.approx(mu.sum())
