import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mvhjm.errors import D1Error, DomainError
from mvhjm.measures import DiscreteMeasure, TestFunction, shift_absorb
from mvhjm.models import BSKernels, DiscreteHJMConfig, PiecewiseLinearAlpha
from mvhjm.riccati import laplace_transform
from mvhjm.simulate import (
    BLOCK,
    MeasurePath,
    PathBatch,
    PathGrid,
    block_generator,
    discrete_drift_statistic,
    discrete_hjm_path,
    discrete_hjm_paths,
    exact_affine_step,
    feller_branching,
    logeuler_bs_step,
    martingale_drift_test,
    martingale_drift_test_batch,
    simulate_affine_path,
    simulate_affine_paths,
    simulate_bs_paths,
)

T = 1.0


def within(samples, target, k=3.0):
    s = np.asarray(samples, dtype=float)
    se = s.std(ddof=1) / np.sqrt(s.size)
    return abs(s.mean() - target) <= k * se


def test_feller_branching_degenerate_cases():
    rng = block_generator(0, 0)
    assert np.all(feller_branching(np.zeros(5), 0.3, rng) == 0)
    assert np.all(feller_branching(np.full(5, 2.0), 0.0, rng) == 2.0)


def test_exact_step_examples():
    rng = block_generator(1, 0)
    mu = DiscreteMeasure.from_atoms([(0.5, 0.0), (0.7, 1.5)], T)
    out = exact_affine_step(mu, 0.2, PiecewiseLinearAlpha.constant(0.0, T), rng)
    assert np.allclose(sorted(out.atoms()), [(0.3, 0.0), (0.5, 1.5)])
    with pytest.raises(DomainError):
        exact_affine_step(mu, 0.0, PiecewiseLinearAlpha.constant(1.0, T), rng)


@pytest.mark.parametrize("u", [0.5, 1.0, 2.0])
def test_exact_step_laplace(u):
    a = PiecewiseLinearAlpha.constant(2.0, T)
    theta = float(a.transported_integral(np.array([0.5]), 0.25)[0])
    W = feller_branching(np.ones(100_000), theta, block_generator(21, 0))
    exact = laplace_transform(DiscreteMeasure.from_atoms([(0.5, 1.0)], T), lambda y: np.full(np.shape(y), -u), a, 0.25)
    assert within(np.exp(-u * W), exact)


def test_exact_step_mean_and_variance():
    theta = 0.3
    W = feller_branching(np.full(100_000, 0.8), theta, block_generator(5, 0))
    assert within(W, 0.8)
    assert within((W - 0.8) ** 2, 0.8 * theta)


def test_affine_paths_mass_martingale_and_support():
    mu0 = DiscreteMeasure.from_atoms([(0.1, 1.0), (0.4, 0.5), (0.9, 2.0)], T)
    grid = PathGrid.uniform(0.5, 10)
    batch = simulate_affine_paths(mu0, grid, PiecewiseLinearAlpha.constant(0.5, T), 10_000, seed=3)
    assert within(batch.total_mass()[:, -1], 3.5)
    assert np.all(batch.weights >= 0)
    for k, t in enumerate(grid.times):
        pos = batch.positions[k]
        assert np.all((pos == 0) | (pos <= T - t + 1e-15))


def test_zero_alpha_path_is_transport():
    mu0 = DiscreteMeasure.from_atoms([(0.1, 1.0), (0.4, 0.5)], T)
    grid = PathGrid.uniform(0.3, 3)
    path = simulate_affine_path(mu0, grid, PiecewiseLinearAlpha.constant(0.0, T), block_generator(0, 0))
    for t, state in zip(grid.times, path.states):
        ref = shift_absorb(mu0, t).normalize()
        assert np.allclose(state.atoms(), ref.atoms())


def test_batch_determinism_and_prefix_stability():
    mu0 = DiscreteMeasure.from_atoms([(0.3, 1.0)], T)
    grid = PathGrid.uniform(0.2, 2)
    a = PiecewiseLinearAlpha.constant(1.0, T)
    small = simulate_affine_paths(mu0, grid, a, 100, seed=9, threads=1)
    again = simulate_affine_paths(mu0, grid, a, 100, seed=9, threads=4)
    large = simulate_affine_paths(mu0, grid, a, BLOCK + 500, seed=9, threads=4)
    assert np.array_equal(small.weights, again.weights)
    assert np.array_equal(small.weights, large.weights[:100])


def test_logeuler_examples():
    rng = block_generator(2, 0)
    mu = DiscreteMeasure.from_atoms([(0.3, 1.0), (0.6, 2.0)], T)
    out = logeuler_bs_step(mu, 0.1, BSKernels.constant(0.0, 0.0, T), rng)
    assert np.allclose(sorted(out.atoms()), [(0.2, 1.0), (0.5, 2.0)])
    grid = PathGrid(np.array([0.0, 0.1]))
    one = simulate_bs_paths(DiscreteMeasure.from_atoms([(0.5, 1.5)], T), grid,
                            BSKernels.constant(0.4, 0.0, T), 100_000, seed=4)
    assert within(one.weights[:, -1, 0], 1.5)
    b = 0.5
    two = simulate_bs_paths(mu, grid, BSKernels.constant(b, 0.0, T), 100_000, seed=5)
    prod = two.weights[:, -1, 0] * two.weights[:, -1, 1]
    assert within(prod, 2.0 * np.exp(b * 0.1))


def test_logeuler_rejects_jumps():
    with pytest.raises(Exception):
        logeuler_bs_step(DiscreteMeasure.from_atoms([(0.3, 1.0), (0.5, 1.0)], T), 0.1,
                         BSKernels.constant(0.1, 0.2, T), block_generator(0, 0))


def test_logeuler_clips_non_psd():
    k = BSKernels(lambda x, y: np.where(x == y, 0.1, 1.0), lambda x, y: np.zeros(np.broadcast(x, y).shape), T)
    with pytest.warns(RuntimeWarning):
        logeuler_bs_step(DiscreteMeasure.from_atoms([(0.3, 1.0), (0.5, 1.0)], T), 0.1, k, block_generator(0, 0))


def test_discrete_examples():
    cfg = DiscreteHJMConfig(2, 0.0)
    path = discrete_hjm_path([1, 2, 3], 1, cfg, lambda i: 0.0, block_generator(0, 0))
    assert np.array_equal(path[1], [3.0, 3.0, 0.0])


def test_discrete_mass_and_drift_statistic():
    cfg = DiscreteHJMConfig(12, 0.0)
    mu0 = np.linspace(1.0, 2.0, 13)
    paths = discrete_hjm_paths(mu0, 12, cfg, lambda i: 0.2, 10_000, seed=1)
    assert np.all(paths >= 0)
    mass = paths.sum(axis=2)
    for t in range(13):
        assert within(mass[:, t], mu0.sum())
    mean, se = discrete_drift_statistic(paths, lambda i: np.asarray(i, dtype=float) ** 2)
    assert np.all(np.abs(mean - mean[0]) <= 3 * np.sqrt(se ** 2 + se[0] ** 2))


def test_drift_test_passes_on_exact_paths():
    mu0 = DiscreteMeasure(np.linspace(0.05, 0.95, 10), np.full(10, 0.1), T)
    batch = simulate_affine_paths(mu0, PathGrid.uniform(0.5, 50), PiecewiseLinearAlpha.constant(0.1, T), 4000, seed=2)
    rep = martingale_drift_test_batch(batch, TestFunction.polynomial([0, 0, 1]))
    assert rep.passed and rep.max_abs_z < 4
    assert rep.to_dict()["pass"] is True


def test_drift_test_deterministic_transport():
    mu0 = DiscreteMeasure(np.linspace(0.05, 0.95, 10), np.full(10, 0.1), T)
    grid = PathGrid.uniform(0.5, 50)
    paths = [simulate_affine_path(mu0, grid, PiecewiseLinearAlpha.constant(0.0, T), block_generator(0, i))
             for i in range(3)]
    phi = TestFunction(lambda x: np.cos(np.pi * np.asarray(x)), lambda x: -np.pi * np.sin(np.pi * np.asarray(x)))
    rep = martingale_drift_test(paths, phi)
    assert rep.passed


def test_drift_test_detects_injected_drift():
    mu0 = DiscreteMeasure(np.linspace(0.05, 0.95, 10), np.full(10, 0.1), T)
    grid = PathGrid.uniform(0.5, 50)
    batch = simulate_affine_paths(mu0, grid, PiecewiseLinearAlpha.constant(0.02, T), 4000, seed=2)
    extra = 0.1 * grid.times
    bad = PathBatch(grid, np.column_stack([batch.positions, np.full(grid.times.size, T)]),
                    np.concatenate([batch.weights, np.broadcast_to(extra[None, :, None], (4000, grid.times.size, 1))],
                                   axis=2), T)
    rep = martingale_drift_test_batch(bad, TestFunction.polynomial([0, 0, 1]))
    assert not rep.passed and rep.max_abs_z > 4


def test_drift_test_requires_d1():
    mu0 = DiscreteMeasure.from_atoms([(0.5, 1.0)], T)
    grid = PathGrid.uniform(0.1, 2)
    path = MeasurePath(grid, [mu0, mu0, mu0])
    with pytest.raises(D1Error):
        martingale_drift_test([path], TestFunction.polynomial([0, 1]))


def test_drift_test_warns_on_coarse_grid():
    mu0 = DiscreteMeasure.from_atoms([(0.5, 1.0)], T)
    batch = simulate_affine_paths(mu0, PathGrid.uniform(0.5, 5), PiecewiseLinearAlpha.constant(0.1, T), 50, seed=0)
    with pytest.warns(RuntimeWarning):
        rep = martingale_drift_test_batch(batch, TestFunction.polynomial([0, 0, 1]))
    assert rep.warnings


@given(st.floats(0.0, 5.0), st.floats(0.0, 2.0), st.integers(0, 1000))
def test_branching_non_negative(w, theta, seed):
    out = feller_branching(np.full(64, w), theta, block_generator(seed, 0))
    assert np.all(out >= 0) and np.all(np.isfinite(out))
