import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slsreg.frontiers import FrontierConfig, build_frontier
from slsreg.numerics import Adam, Tensor
from slsreg.numerics.autodiff import NonFiniteError
from slsreg.quantiles import (
    POSITIVITY_EPS,
    QuantileConfig,
    QuantileNet,
    pinball_loss,
    quantile_forward,
    quantile_transform,
    quantile_update,
)


def test_pinball_examples():
    assert pinball_loss(0.9, 1.0, 0.0) == pytest.approx(0.9)
    assert pinball_loss(0.9, 0.0, 1.0) == pytest.approx(0.1)
    assert pinball_loss(0.3, 2.0, 2.0) == 0.0


@settings(deadline=None, max_examples=60)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=15), st.floats(0.05, 0.95))
def test_pinball_minimizer_is_an_empirical_quantile(sample, level):
    g = np.array(sample)
    candidates = np.sort(g)
    losses = [pinball_loss(level, g, c).sum() for c in candidates]
    best = candidates[int(np.argmin(losses))]
    # minimizers of the summed pinball loss: any order statistic of rank ceil(n * level)
    k = int(np.ceil(len(g) * level))
    assert min(losses) == pytest.approx(pinball_loss(level, g, candidates[k - 1]).sum())
    assert np.any(np.isclose(candidates, best))


def test_transform_of_zero_raw():
    q = quantile_transform(Tensor(np.zeros((2, 3)))).value
    assert np.allclose(q, 1.0 + POSITIVITY_EPS)


def test_transform_sorts():
    raw = np.log(np.array([[3.0, 1.0, 2.0]]) - POSITIVITY_EPS)
    assert np.allclose(quantile_transform(Tensor(raw)).value, [[1.0, 2.0, 3.0]])


def _fit(net, X, g, levels, steps, lr=1e-2, seed=0):
    opt = Adam(net.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    for _ in range(steps):
        idx = rng.integers(0, len(g), 256)
        quantile_update(net, opt, X[idx], g[idx], levels)


def test_constant_scores_pull_all_heads_to_the_constant():
    rng = np.random.default_rng(0)
    net = QuantileNet(QuantileConfig(feature_dim=1, hidden_dims=[8]), rng)
    X = rng.uniform(-1, 1, (1000, 1))
    _fit(net, X, np.full(1000, 2.0), (0.4, 0.5, 0.6), 800, lr=2e-2)
    assert np.allclose(net.predict(X[:50]), 2.0, atol=0.05)


def test_uniform_scores_recover_levels():
    rng = np.random.default_rng(1)
    net = QuantileNet(QuantileConfig(feature_dim=2, hidden_dims=[16]), rng)
    X = rng.normal(size=(5000, 2))
    g = rng.uniform(size=5000)
    _fit(net, X, g, (0.4, 0.5, 0.6), 2000)
    q = net.predict(rng.normal(size=(500, 2))).mean(axis=0)
    assert np.allclose(q, [0.4, 0.5, 0.6], atol=0.05)


def test_frozen_net_covers_target_fraction():
    rng = np.random.default_rng(2)
    net = QuantileNet(QuantileConfig(feature_dim=1, hidden_dims=[16]), rng)
    X = rng.uniform(-1, 1, (8000, 1))
    g = (1.0 + X[:, 0] ** 2) * rng.exponential(size=8000)
    net.init_from_scores(g, (0.85, 0.9, 0.95))
    _fit(net, X, g, (0.85, 0.9, 0.95), 2500)
    Xt = rng.uniform(-1, 1, (5000, 1))
    gt = (1.0 + Xt[:, 0] ** 2) * rng.exponential(size=5000)
    assert abs(np.mean(gt <= quantile_forward(net, Xt)[1]) - 0.9) < 0.02


def test_update_leaves_frontier_untouched():
    rng = np.random.default_rng(3)
    frontier = build_frontier(FrontierConfig(hidden_dims=[4], flow_hidden_dims=[4]), rng)
    before = [p.value.copy() for p in frontier.parameters()]
    net = QuantileNet(QuantileConfig(feature_dim=1, hidden_dims=[4]), rng)
    X, Y = rng.normal(size=(32, 1)), rng.normal(size=(32, 2))
    g = frontier.forward(X, Y).score.value
    quantile_update(net, Adam(net.parameters()), X, g, (0.4, 0.5, 0.6))
    assert all(np.array_equal(a, p.value) for a, p in zip(before, frontier.parameters()))


def test_nan_scores_abort():
    net = QuantileNet(QuantileConfig(feature_dim=1, hidden_dims=[4]), np.random.default_rng(0))
    with pytest.raises(NonFiniteError):
        quantile_update(net, Adam(net.parameters()), np.zeros((2, 1)), np.array([1.0, np.nan]), (0.4, 0.5, 0.6))


def test_outputs_positive_and_sorted():
    rng = np.random.default_rng(4)
    net = QuantileNet(QuantileConfig(feature_dim=3, hidden_dims=[8]), rng)
    for p in net.parameters():
        p.value = p.value + rng.normal(size=p.value.shape)
    q = net.predict(rng.normal(size=(1000, 3)) * 3)
    assert np.all(q > 0)
    assert np.all(np.diff(q, axis=1) >= 0)
