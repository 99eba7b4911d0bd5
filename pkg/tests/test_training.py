import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slsreg.frontiers import FrontierConfig, NormFrontier, build_frontier
from slsreg.numerics import autodiff as ad
from slsreg.quantiles import QuantileConfig, QuantileNet
from slsreg.training import (
    MarginSchedule,
    TrainConfig,
    TrainingDiverged,
    WindowSchedule,
    gaussian_nll_baseline,
    make_objective,
    surrogate_loss,
    train,
    window_bounds,
)


class FixedQuantiles:
    """Stand-in quantile net returning a fixed (low, mid, high) triple."""

    def __init__(self, triple):
        self.triple = np.asarray(triple, dtype=np.float64)

    def predict(self, X):
        return np.tile(self.triple, (len(X), 1))


def norm1d():
    return NormFrontier(FrontierConfig(family="norm", response_dim=1, feature_dim=1, hidden_dims=[4]),
                        np.random.default_rng(0))


# -- schedule ------------------------------------------------------------------


def test_schedule_endpoints():
    s = WindowSchedule.default(0.7, total_steps=1000)
    assert s.warmup_steps == 300
    phi, psi = window_bounds(s, s.warmup_steps)
    assert phi == pytest.approx(0.8 * 0.3) and psi == pytest.approx(0.8 * 0.3)
    phi, psi = window_bounds(s, 10**7)
    assert phi == pytest.approx(0.03) and psi == pytest.approx(0.03)


def test_schedule_midpoint_formula():
    m = MarginSchedule(error_init=0.4, error_min=0.05, steepness=2.0, center=3.0)
    s0 = 1 / (1 + math.exp(6.0))
    assert m(3.0) == pytest.approx(0.4 + (0.05 - 0.4) * (0.5 - s0) / (1 - s0))
    sharp = MarginSchedule(0.4, 0.05, 50.0, 3.0)
    assert sharp(3.0) == pytest.approx(0.225, abs=1e-12)


@settings(deadline=None, max_examples=60)
@given(st.floats(0.02, 0.98), st.integers(10, 5000))
def test_schedule_monotone_and_valid(tau, total):
    s = WindowSchedule.default(tau, total)
    prev = (math.inf, math.inf)
    for step in np.linspace(s.warmup_steps, 3 * total, 40).astype(int):
        phi, psi = s.bounds(step)
        lo, _, hi = s.levels(step)
        assert 0 < lo < tau < hi < 1
        assert phi <= prev[0] + 1e-15 and psi <= prev[1] + 1e-15
        prev = (phi, psi)


def test_schedule_rejects_zero_floor():
    side = MarginSchedule(0.2, 0.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        WindowSchedule(0.5, 0, side, side)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=1.0)
    with pytest.raises(ValueError):
        TrainConfig(total_steps=10, warmup_steps=10)
    with pytest.raises(ValueError):
        TrainConfig(objective="bogus")


def test_beta_annealing_starts_after_unfreeze():
    cfg = TrainConfig(total_steps=1000, beta_init=1.0, beta_max=1e3)
    start = cfg.unfreeze_step()
    assert start == 300 + int(0.25 * 700)
    assert cfg.beta_at(start) == 1.0
    assert cfg.beta_at(start + (1000 - start) // 2) == pytest.approx(1e3)
    assert cfg.beta_at(1000) == pytest.approx(1e3)
    mid = cfg.beta_at(start + (1000 - start) // 4)
    assert 1.0 < mid < 1e3


# -- surrogate loss ------------------------------------------------------------


def test_warmup_loss_is_interval_length():
    model = norm1d()
    sched = WindowSchedule.default(0.5, 100)
    info = surrogate_loss(model, FixedQuantiles([1, 2, 3]), np.zeros((1, 1)), np.array([[2.0]]), 1, sched,
                          make_objective(model, "volume"))
    assert float(info.loss.value) == pytest.approx(4.0)


def test_window_gate_keeps_only_in_window_samples():
    model = norm1d()
    sched = WindowSchedule.default(0.5, 100)
    Y = np.array([[0.5], [2.0], [5.0]])
    info = surrogate_loss(model, FixedQuantiles([1, 2, 3]), np.zeros((3, 1)), Y, 99, sched,
                          make_objective(model, "volume"))
    assert info.in_window == 1
    assert float(info.loss.value) == pytest.approx(2 * 2.0 / 3)


def test_cvar_gate():
    model = norm1d()
    sched = WindowSchedule.default(0.5, 100)
    Y = np.array([[0.5], [2.0], [5.0]])
    info = surrogate_loss(model, FixedQuantiles([1, 2, 3]), np.zeros((3, 1)), Y, 99, sched,
                          make_objective(model, "identity"), gate="cvar")
    assert info.in_window == 2
    assert float(info.loss.value) == pytest.approx((2.0 + 5.0) / 3)


def test_warmup_equivalence_is_bit_exact():
    rng = np.random.default_rng(0)
    model = build_frontier(FrontierConfig(hidden_dims=[6], flow_hidden_dims=[6]), rng)
    X, Y = rng.normal(size=(16, 1)), rng.normal(size=(16, 2))
    sched = WindowSchedule.default(0.9, 100)
    obj = make_objective(model, "volume")
    info = surrogate_loss(model, FixedQuantiles([1, 2, 3]), X, Y, 5, sched, obj)
    out = model.forward(X, Y)
    assert float(info.loss.value) == float(obj(out.score, ad.tensor(X), out).mean().value)


def test_theta_step_does_not_touch_quantile_params():
    rng = np.random.default_rng(1)
    model = build_frontier(FrontierConfig(hidden_dims=[6], flow_hidden_dims=[6]), rng)
    qnet = QuantileNet(QuantileConfig(feature_dim=1, hidden_dims=[4]), rng)
    X, Y = rng.normal(size=(16, 1)), rng.normal(size=(16, 2))
    qnet.init_from_scores(model.forward(X, Y).score.value, (0.3, 0.5, 0.7))
    info = surrogate_loss(model, qnet, X, Y, 99, WindowSchedule.default(0.5, 100), make_objective(model, "volume"))
    grads = ad.backward(info.loss)
    assert not any(p in grads for p in qnet.parameters())


def test_surrogate_identity_small():
    """Windowed average of Vol(G) over the window matches the integral of Vol(q_beta)."""
    rng = np.random.default_rng(3)
    model = norm1d()
    n = 400_000
    X = rng.uniform(-1, 1, (n, 1))
    s = 0.5 + 0.25 * X[:, 0]
    Y = (s * rng.exponential(size=n)).reshape(-1, 1)
    tau, phi = 0.5, 0.1

    class Exact:
        def predict(self, Xq):
            sq = 0.5 + 0.25 * Xq[:, 0]
            return np.stack([-sq * np.log(1 - b) for b in (tau - phi, tau, tau + phi)], axis=1)

    sched = WindowSchedule.default(tau, 100)
    info = surrogate_loss(model, Exact(), X, Y, 99, sched, make_objective(model, "volume"))
    est = float(info.loss.value) / (2 * phi)
    betas = np.linspace(tau - phi, tau + phi, 2001)
    # E_X[2 s(X)] = 1, so the integral is (1 / width) * int -log(1 - b) db
    exact = np.trapezoid(-np.log(1 - betas), betas) / (2 * phi)
    g = 2 * Y[:, 0]
    keep = (Exact().predict(X)[:, 0] <= Y[:, 0]) & (Y[:, 0] <= Exact().predict(X)[:, 2])
    se = np.std(g * keep) / math.sqrt(n) / (2 * phi)
    assert abs(est - exact) < 3 * se


# -- end-to-end ----------------------------------------------------------------


def _gauss_data(n, seed):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 1))
    Y = np.stack([X[:, 0], np.zeros(n)], axis=1) + rng.normal(size=(n, 2)) * np.array([0.5, 0.3])
    return X, Y


def _quick_config(**kw):
    return TrainConfig(**{"tau": 0.8, "total_steps": 120, "batch_size": 64, "eval_every": 40,
                          "lr_frontier": 3e-3, "lr_quantile": 3e-3, **kw})


def test_training_is_deterministic():
    X, Y = _gauss_data(600, 0)
    fc = FrontierConfig(hidden_dims=[8], flow_hidden_dims=[8])
    a = train(X, Y, _quick_config(), fc)
    b = train(X, Y, _quick_config(), fc)
    assert a.log_lines() == b.log_lines()
    assert all(np.array_equal(p.value, q.value) for p, q in
               zip(a.region.frontier.parameters(), b.region.frontier.parameters()))


def test_training_log_fields_and_best_checkpoint():
    X, Y = _gauss_data(600, 1)
    res = train(X, Y, _quick_config(), FrontierConfig(hidden_dims=[8], identity_flow=True))
    assert [r["step"] for r in res.log] == [40, 80, 120]
    for key in ("theta_loss", "in_window_fraction", "phi", "psi", "beta", "val_coverage", "val_adjusted_volume"):
        assert key in res.log[0]
    assert res.best.val_adjusted_volume == min(r["val_adjusted_volume"] for r in res.log)


def test_union_training_runs_and_unfreezes():
    X, Y = _gauss_data(400, 2)
    res = train(X, Y, _quick_config(total_steps=80), FrontierConfig(family="union", n_components=2,
                                                                    hidden_dims=[6], flow_hidden_dims=[6]))
    assert res.log[-1]["beta"] > 1.0
    assert res.region.is_union


@pytest.mark.filterwarnings("ignore:invalid value encountered")
def test_divergence_reports_last_checkpoint():
    X, Y = _gauss_data(300, 3)
    Y[5, 0] = np.nan
    with pytest.raises(TrainingDiverged):
        train(X, Y, _quick_config(), FrontierConfig(hidden_dims=[4], identity_flow=True),
              X_val=X[:50], Y_val=np.nan_to_num(Y[:50]))


def test_nll_baseline_learns_near_diagonal_shape():
    rng = np.random.default_rng(4)
    n = 3000
    X = rng.uniform(-1, 1, (n, 1))
    Y = rng.normal(size=(n, 2)) * np.array([1.0, 0.5])
    region = gaussian_nll_baseline(X, Y, _quick_config(total_steps=600, batch_size=128, tau=0.5),
                                   FrontierConfig(hidden_dims=[8], identity_flow=True))
    L = region.frontier.shape(region.features(X[:200])).dense_factor()
    L = L / np.abs(L).max(axis=(1, 2), keepdims=True)
    assert np.max(np.abs(L[:, 1, 0])) < 0.1
    cov = np.mean(region.contains(X, Y))
    assert abs(cov - 0.5) < 0.05
