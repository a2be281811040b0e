import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mg_lab.errors import InvalidRangeError, UnknownClassError
from mg_lab.metrics import energy_distance
from mg_lab.mixture import (class_posterior, grid_two_class, log_density, make_mixture, sample, sample_pair)


from thresholds import ENERGY_NULL_5K


def test_smallest_grid():
    m = grid_two_class(1, 2, 4.0, 0.1)
    assert np.array_equal(m.means, [[-2, 0], [2, 0]])
    assert list(m.classes) == [0, 1]


def test_default_grid_counts(grid):
    assert grid.num_components == 25
    assert np.sum(grid.classes == 0) == 13 and np.sum(grid.classes == 1) == 12
    assert abs(grid.weights.sum() - 1) <= 1e-12


@pytest.mark.parametrize("dims", [(0, 3), (1, 1), (3, 0)])
def test_degenerate_grid_rejected(dims):
    with pytest.raises(InvalidRangeError):
        grid_two_class(*dims)


def test_mixture_validation():
    with pytest.raises(InvalidRangeError):
        make_mixture([[0, 0]], 0.0, [0])
    with pytest.raises(InvalidRangeError):
        make_mixture([[0, 0], [1, 1]], 1.0, [0, 0], num_classes=2)  # class 1 owns nothing


def test_class_priors(grid):
    np.testing.assert_allclose(grid.class_priors, [13 / 25, 12 / 25], rtol=1e-12)


def test_single_component_always_its_class(rng):
    m = make_mixture([[0, 0], [5, 5]], 0.1, [1, 0], weights=[1.0, 1e-300])
    assert {sample_pair(m, rng)[1] for _ in range(200)} == {1}


def test_class_frequencies(rng):
    _, c = sample(grid_two_class(1, 2, 4.0, 0.1), 100_000, rng)
    # 3 sigma binomial interval around 0.5 (oracles/derive.py class_frequency)
    assert 0.49525658350974744 <= np.mean(c == 0) <= 0.5047434164902526


def test_zero_std_limit(rng):
    m = make_mixture([[1.5, -2.0], [3.0, 4.0]], 1e-300, [0, 1])
    x, c = sample(m, 50, rng)
    assert np.array_equal(x, m.means[[0 if k == 0 else 1 for k in c]])


def test_conditional_sampling_respects_class(grid, rng):
    x, c = sample(grid, 500, rng, c=1)
    assert np.all(c == 1)
    with pytest.raises(UnknownClassError):
        sample(grid, 5, rng, c=2)


def test_log_density_examples(standard_gaussian, one_class):
    assert log_density(standard_gaussian, [0, 0]) == pytest.approx(-np.log(2 * np.pi), rel=1e-15)
    x = np.array([[0.3, 0.2], [-4, 1]])
    assert np.array_equal(log_density(one_class, x), log_density(one_class, x, 0))
    pair = make_mixture([[-1, 0], [1, 0]], 0.5, [0, 0])
    comp = -np.log(2 * np.pi * 0.25) - 0.5 * 1.0 / 0.25
    assert log_density(pair, [0, 0]) == pytest.approx(comp, rel=1e-14)


def test_log_density_unknown_class(grid):
    with pytest.raises(UnknownClassError):
        log_density(grid, [0, 0], 3)


def test_posterior_examples(one_class):
    assert np.array_equal(class_posterior(one_class, [0.1, 0.2]), [1.0])
    sym = make_mixture([[-1, 0], [1, 0]], 0.3, [0, 1])
    np.testing.assert_allclose(class_posterior(sym, [0, 0]), [0.5, 0.5], rtol=1e-15)
    far = make_mixture([[0, 0], [2, 0]], 0.1, [0, 1])  # spacing 20 std
    assert class_posterior(far, [0, 0])[0] > 0.999


def _grid_points(m, n=301):
    pad = 6 * m.stds.max()
    lo, hi = m.means.min(0) - pad, m.means.max(0) + pad
    xs, ys = np.linspace(lo[0], hi[0], n), np.linspace(lo[1], hi[1], n)
    X, Y = np.meshgrid(xs, ys)
    return np.stack([X, Y], -1), (xs[1] - xs[0]) * (ys[1] - ys[0])


@pytest.mark.parametrize("c", [None, 0, 1])
def test_density_normalizes(c):
    m = grid_two_class(3, 3, 2.0, 0.3)
    pts, cell = _grid_points(m)
    assert np.exp(log_density(m, pts, c)).sum() * cell == pytest.approx(1.0, abs=1e-3)


def test_posterior_consistent_with_bayes(grid, rng):
    x = rng.uniform(-5, 5, size=(200, 2))
    post = class_posterior(grid, x)
    for c in range(2):
        joint = log_density(grid, x, c) + np.log(grid.class_priors[c])
        np.testing.assert_allclose(np.log(post[:, c]), joint - log_density(grid, x), atol=1e-10)


def test_sampling_matches_density(grid):
    a, _ = sample(grid, 5000, np.random.default_rng(11))
    b, _ = sample(grid, 5000, np.random.default_rng(12))
    assert energy_distance(a, b) < ENERGY_NULL_5K


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(2, 4), st.floats(0.5, 3), st.floats(0.05, 1))
def test_grid_properties(rows, cols, spacing, std):
    m = grid_two_class(rows, cols, spacing, std)
    assert m.num_components == rows * cols
    np.testing.assert_allclose(m.means.mean(0), 0, atol=1e-12)
    post = class_posterior(m, m.means)
    np.testing.assert_allclose(post.sum(-1), 1, rtol=1e-12)
