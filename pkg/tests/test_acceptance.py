"""The twelve acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line (shown in the terminal summary) before
asserting, so a failing run still reports every criterion it reached.
"""

import math
import time

import numpy as np
import pytest
import yaml
from scipy import stats

from gradcases import BINARY, UNARY, spd_logdet
from slsreg.cli import main as cli_main
from slsreg.conformal import calibrate, conformal_rank
from slsreg.evaldata import generate, get_task
from slsreg.evaldata.metrics import bounding_box, monte_carlo_volume
from slsreg.evaldata.oracles import (
    MAD_CENTER_ANALYTIC,
    gaussian_hdr_volume,
    mad_center_grid_search,
    mad_objective,
    mad_oracle_objective,
    oracle_hdr,
)
from slsreg.frontiers import FrontierConfig, NormFrontier, UnionOfFlows, build_frontier, flow_forward, \
    flow_inverse, unit_ball_volume, volume_surrogate
from slsreg.numerics import Adam, Tensor
from slsreg.numerics.gradcheck import check_gradients
from slsreg.quantiles import QuantileConfig, QuantileNet, pinball_tape, quantile_loss, quantile_update
from slsreg.training import (
    TrainConfig,
    WindowSchedule,
    center_function,
    gaussian_nll_baseline,
    mad_objective_demo,
    make_objective,
    surrogate_loss,
    train,
)

LR = dict(lr_frontier=3e-3, lr_quantile=3e-3, eval_every=100)


def splits(task, n_train, n_cal=20_000, n_test=10_000):
    return generate(task, n_train, 0), generate(task, n_cal, 1), generate(task, n_test, 2)


def calibrated(region, cal):
    return region.with_scale(calibrate(region, cal.X, cal.Y).scale)


def perturb(params, rng, scale):
    for p in params:
        p.value = p.value + scale * rng.normal(size=p.value.shape)


# -- 1 -------------------------------------------------------------------------


def test_01_gradient_correctness(acceptance):
    start = time.time()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for build in UNARY.values():
            a = Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True)
            worst = max(worst, check_gradients(lambda: build(a), [a]))
        for build in BINARY.values():
            a, b = (Tensor(rng.uniform(-2, 2, (3, 4)), requires_grad=True) for _ in range(2))
            worst = max(worst, check_gradients(lambda: build(a, b), [a, b]))
        m = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
        worst = max(worst, check_gradients(lambda: spd_logdet(m), [m]))
        g = rng.exponential(size=8)
        q = Tensor(rng.uniform(0.1, 2.0, 8), requires_grad=True)
        worst = max(worst, check_gradients(lambda: pinball_tape(0.7, g, q).mean(), [q]))
        qnet = QuantileNet(QuantileConfig(feature_dim=2, hidden_dims=[5]), rng)
        perturb(qnet.parameters(), rng, 0.3)
        Xq = rng.normal(size=(8, 2))
        worst = max(worst, check_gradients(lambda: quantile_loss(qnet, Xq, g, (0.4, 0.5, 0.6)), qnet.parameters()))

    frontiers = [FrontierConfig(family="norm", response_dim=1, hidden_dims=[5]),
                 FrontierConfig(hidden_dims=[5], flow_hidden_dims=[5], shape_mode="full"),
                 FrontierConfig(response_dim=3, hidden_dims=[5], flow_hidden_dims=[5], shape_mode="lowrank"),
                 FrontierConfig(family="union", n_components=2, hidden_dims=[5], flow_hidden_dims=[5])]
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        for cfg in frontiers:
            model = build_frontier(cfg, rng)
            perturb(model.parameters(), rng, 0.2)
            if isinstance(model, UnionOfFlows):
                model.beta = 2.0
            X, Y = rng.normal(size=(6, 1)), rng.normal(size=(6, cfg.response_dim))
            qnet = QuantileNet(QuantileConfig(feature_dim=1, hidden_dims=[4]), rng)
            qnet.init_from_scores(model.forward(X, Y).score.value, (0.1, 0.5, 0.9))
            sched = WindowSchedule.default(0.5, 100)
            obj = make_objective(model, "volume")
            loss = lambda: surrogate_loss(model, qnet, X, Y, 99, sched, obj).loss  # noqa: E731
            worst = max(worst, check_gradients(loss, model.parameters(), max_entries=6, rng=rng))
    elapsed = time.time() - start
    ok = worst < 1e-4 and elapsed < 60
    acceptance(1, ok, f"worst relative error {worst:.2e} (< 1e-4), {elapsed:.0f}s")
    assert ok


# -- 2 -------------------------------------------------------------------------


def _flow_errors(layers, d, rng):
    Y, X = rng.normal(size=(50, d)), rng.uniform(-1, 1, (50, 1))
    inv_err = float(np.max(np.abs(flow_inverse(layers, flow_forward(layers, Y, X).value, X) - Y)))
    h, det_err = 1e-5, 0.0
    for i in range(50):
        J = np.empty((d, d))
        for j in range(d):
            e = np.zeros((1, d))
            e[0, j] = h
            J[:, j] = (flow_forward(layers, Y[i:i + 1] + e, X[i:i + 1]).value
                       - flow_forward(layers, Y[i:i + 1] - e, X[i:i + 1]).value)[0] / (2 * h)
        det_err = max(det_err, abs(np.linalg.det(J) - 1.0))
    return det_err, inv_err


def test_02_flow_volume_preservation(acceptance):
    start = time.time()
    rng = np.random.default_rng(0)
    cfg = FrontierConfig(hidden_dims=[16], flow_hidden_dims=[16, 16], flow_layers=3)
    random_model = build_frontier(cfg, rng)
    for layer in random_model.layers:
        perturb(layer.shift_net.parameters(), rng, 0.5)
    tr = generate(get_task("gauss2d"), 2000, 0)
    trained = train(tr.X, tr.Y, TrainConfig(tau=0.8, total_steps=300, batch_size=128, **LR), cfg).region.frontier
    results = {"random": _flow_errors(random_model.layers, 2, rng), "trained": _flow_errors(trained.layers, 2, rng)}
    elapsed = time.time() - start
    ok = all(det < 1e-6 and inv < 1e-10 for det, inv in results.values()) and elapsed < 60
    detail = ", ".join(f"{k}: |det J - 1| {det:.1e} inverse {inv:.1e}" for k, (det, inv) in results.items())
    acceptance(2, ok, f"{detail}, {elapsed:.0f}s")
    assert ok


# -- 3 -------------------------------------------------------------------------


@pytest.mark.slow
def test_03_gaussian_oracle_recovery(acceptance):
    task = get_task("gauss2d")
    tr, cal, te = splits(task, 8000)
    oracle_cov = task.cov(te.X[:, 0])
    lines, ok = [], True
    for tau in (0.5, 0.9):
        start = time.time()
        region = train(tr.X, tr.Y, TrainConfig(tau=tau, total_steps=3000, **LR),
                       FrontierConfig(hidden_dims=[32, 32], identity_flow=True)).region
        region = calibrated(region, cal)
        cov = float(region.contains(te.X, te.Y).mean())
        oracle = np.array([gaussian_hdr_volume(c, tau) for c in oracle_cov])
        ratio = float(region.volumes(te.X).mean() / oracle.mean())
        elapsed = time.time() - start
        ok &= abs(cov - tau) <= 0.02 and abs(ratio - 1) <= 0.10 and elapsed < 600
        lines.append(f"tau={tau}: coverage {cov:.4f}, volume / analytic HDR {ratio:.3f}, {elapsed:.0f}s")
    acceptance(3, ok, "; ".join(lines))
    assert ok


# -- 4 -------------------------------------------------------------------------


def _fixed_x_run(name, tau, family):
    task = get_task(name)
    tr, cal, te = splits(task, 6000)
    fcfg = FrontierConfig(family=family, hidden_dims=[16], flow_hidden_dims=[32, 32], n_components=4)
    region = calibrated(train(tr.X, tr.Y, TrainConfig(tau=tau, total_steps=2000, **LR), fcfg).region, cal)
    return region, te


@pytest.mark.slow
def test_04_fixed_x_shapes(acceptance):
    start = time.time()
    star, star_te = _fixed_x_run("star", 0.7, "flow")
    star_cov = float(star.contains(star_te.X, star_te.Y).mean())
    union, te = _fixed_x_run("three_modes", 0.9, "union")
    flow, _ = _fixed_x_run("three_modes", 0.9, "flow")
    union_cov = float(union.contains(te.X, te.Y).mean())
    box = bounding_box(te.Y)
    x0 = np.zeros(1)
    vu, su = monte_carlo_volume(union, x0, box, 400_000, np.random.default_rng(10))
    vf, sf = monte_carlo_volume(flow, x0, box, 400_000, np.random.default_rng(11))
    elapsed = time.time() - start
    ok = abs(star_cov - 0.7) <= 0.02 and abs(union_cov - 0.9) <= 0.02 and vu <= vf and elapsed < 1800
    acceptance(4, ok, f"star coverage {star_cov:.4f}; three-mode union coverage {union_cov:.4f}; "
                      f"MC volume union {vu:.3f}+-{su:.3f} vs flow {vf:.3f}+-{sf:.3f}, {elapsed:.0f}s")
    assert ok


# -- 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_05_outlier_robustness(acceptance):
    start = time.time()
    task = get_task("gauss2d_outliers")
    tr, cal, te = splits(task, 8000)
    fcfg = FrontierConfig(hidden_dims=[32, 32], identity_flow=True)
    cfg = TrainConfig(tau=0.6, total_steps=2000, **LR)
    sls = calibrated(train(tr.X, tr.Y, cfg, fcfg).region, cal)
    nll = calibrated(gaussian_nll_baseline(tr.X, tr.Y, cfg, fcfg), cal)
    (cs, vs), (cn, vn) = [(float(r.contains(te.X, te.Y).mean()), float(r.volumes(te.X).mean())) for r in (sls, nll)]
    elapsed = time.time() - start
    ok = vs < vn and cs >= 0.58 and cn >= 0.58 and elapsed < 600
    acceptance(5, ok, f"SLS volume {vs:.4f} (coverage {cs:.4f}) vs Gaussian NLL {vn:.4f} (coverage {cn:.4f}), "
                      f"{elapsed:.0f}s")
    assert ok


# -- 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_06_shrinking_window_benefit(acceptance):
    start = time.time()
    task = get_task("exp1d")
    tau = 0.3
    tr, cal, te = splits(task, 8000)
    res = train(tr.X, tr.Y, TrainConfig(tau=tau, total_steps=2000, **LR),
                FrontierConfig(response_dim=1, hidden_dims=[32, 32]), keep_warmup_region=True)
    final, warm = calibrated(res.region, cal), calibrated(res.warmup_region, cal)
    xs = te.X[:200]
    oracle = float(np.mean([oracle_hdr(task, x, tau).volume for x in xs[:, 0]]))
    lf, lw = float(final.volumes(xs).mean()), float(warm.volumes(xs).mean())
    elapsed = time.time() - start
    ok = lf <= 0.9 * lw and abs(lf / oracle - 1) <= 0.15 and elapsed < 300
    acceptance(6, ok, f"final length {lf:.4f} vs warm-up {lw:.4f} ({1 - lf / lw:.1%} shorter), "
                      f"grid oracle {oracle:.4f} (ratio {lf / oracle:.3f}), {elapsed:.0f}s")
    assert ok


# -- 7 -------------------------------------------------------------------------


class _ExactExpQuantiles:
    """Quantiles of ``|Y|`` for ``Y = s(X) E`` at the window edges and center."""

    def __init__(self, levels):
        self.levels = levels

    def predict(self, X):
        s = 0.5 + 0.25 * X[:, 0]
        return np.stack([-s * math.log1p(-b) for b in self.levels], axis=1)


def test_07_surrogate_identity(acceptance):
    start = time.time()
    tau, widths = 0.8, (0.2, 0.1, 0.05)
    model = NormFrontier(FrontierConfig(family="norm", response_dim=1, hidden_dims=[2]), np.random.default_rng(0))
    objective = make_objective(model, "volume")
    sched = WindowSchedule.default(tau, 100)
    rng = np.random.default_rng(7)
    sums = {w: np.zeros(2) for w in widths}
    n, chunk = 0, 1_000_000
    for _ in range(50):
        X = rng.uniform(-1, 1, (chunk, 1))
        Y = ((0.5 + 0.25 * X[:, 0]) * rng.exponential(size=chunk)).reshape(-1, 1)
        for w in widths:
            q = _ExactExpQuantiles((tau - w / 2, tau, tau + w / 2))
            info = surrogate_loss(model, q, X, Y, sched.warmup_steps + 1, sched, objective)
            lo, _, hi = q.predict(X).T
            per_sample = 2 * np.abs(Y[:, 0]) * ((lo <= Y[:, 0]) & (Y[:, 0] <= hi))
            sums[w] += (float(info.loss.value) * chunk, float(per_sample @ per_sample))
        n += chunk
    J = -math.log1p(-tau)  # E_X[2 s(X)] = 1
    lines, ok, gaps = [], True, []
    for w in widths:
        mean = sums[w][0] / n
        se = math.sqrt(sums[w][1] / n - mean**2) / math.sqrt(n)
        a, b = tau - w / 2, tau + w / 2
        # closed form of the integral of -log(1 - beta) over [a, b]
        integral = (1 - b) * math.log1p(-b) - (1 - a) * math.log1p(-a) + (b - a)
        z = (mean - integral) / se
        gaps.append(abs(mean / w - J))
        ok &= abs(z) < 3
        lines.append(f"w={w}: z={z:+.2f}, |J_n - J|={gaps[-1]:.4f}")
    ok &= gaps[0] > gaps[1] > gaps[2]
    elapsed = time.time() - start
    ok &= elapsed < 120
    acceptance(7, ok, "; ".join(lines) + f", {elapsed:.0f}s")
    assert ok


# -- 8 -------------------------------------------------------------------------


def test_08_conformal_marginal_coverage(acceptance):
    start = time.time()
    task = get_task("gauss2d")
    tr = generate(task, 2000, 0)
    pool = generate(task, 100_000, 5)
    n_cal, n_test, n_splits = 500, 2000, 200
    lines, ok = [], True
    for tau in (0.5, 0.9):
        region = train(tr.X, tr.Y, TrainConfig(tau=tau, total_steps=300, batch_size=128, **LR),
                       FrontierConfig(hidden_dims=[16], identity_flow=True)).region
        s = region.scores(pool.X, pool.Y) / region.base_thresholds(pool.X)
        rng = np.random.default_rng(8)
        k = conformal_rank(n_cal, tau)
        covs = np.empty(n_splits)
        for i in range(n_splits):
            idx = rng.permutation(len(s))
            r = np.sort(s[idx[:n_cal]])[k - 1]
            covs[i] = np.mean(s[idx[n_cal:n_cal + n_test]] <= r)
        se = math.sqrt(tau * (1 - tau) * (1 / n_cal + 1 / n_test) / n_splits)
        mean = float(covs.mean())
        hit = tau - 3 * se <= mean <= tau + 1 / (n_cal + 1) + 3 * se
        ok &= hit
        lines.append(f"tau={tau}: mean coverage {mean:.4f} in [{tau - 3 * se:.4f}, "
                     f"{tau + 1 / (n_cal + 1) + 3 * se:.4f}]")
    elapsed = time.time() - start
    ok &= elapsed < 300
    acceptance(8, ok, "; ".join(lines) + f", {elapsed:.0f}s")
    assert ok


# -- 9 -------------------------------------------------------------------------


def test_09_quantile_net(acceptance):
    start = time.time()
    rng = np.random.default_rng(1)
    net = QuantileNet(QuantileConfig(feature_dim=2, hidden_dims=[16]), rng)
    X = rng.normal(size=(5000, 2))
    g = rng.uniform(size=5000)
    opt = Adam(net.parameters(), lr=1e-2)
    for _ in range(2000):
        idx = rng.integers(0, len(g), 256)
        quantile_update(net, opt, X[idx], g[idx], (0.4, 0.5, 0.6))
    heads = net.predict(rng.normal(size=(2000, 2))).mean(axis=0)
    q = net.predict(rng.normal(size=(10_000, 2)) * 3)
    violations = int(np.sum(np.diff(q, axis=1) < 0))
    elapsed = time.time() - start
    ok = np.all(np.abs(heads - [0.4, 0.5, 0.6]) <= 0.05) and violations == 0 and elapsed < 120
    acceptance(9, ok, f"heads {np.round(heads, 4).tolist()}, {violations} order violations on 1e4 inputs, "
                      f"{elapsed:.0f}s")
    assert ok


# -- 10 ------------------------------------------------------------------------


@pytest.mark.slow
def test_10_mad_generalization(acceptance):
    start = time.time()
    task = get_task("mad")
    tr, te = generate(task, 8000, 0), generate(task, 20_000, 2)
    region, _ = mad_objective_demo(tr.X, tr.Y, TrainConfig(total_steps=6000, **LR),
                                   FrontierConfig(family="norm", response_dim=1, hidden_dims=[32, 32]))
    learned = mad_objective(task, center_function(region)(te.X), te.X)
    oracle = mad_oracle_objective(task, te.X)
    c_star, _ = mad_center_grid_search(n_samples=10**6, seed=0)
    elapsed = time.time() - start
    ok = abs(learned / oracle - 1) <= 0.10 and abs(c_star - MAD_CENTER_ANALYTIC) <= 1e-3 and elapsed < 600
    acceptance(10, ok, f"learned {learned:.4f} vs oracle {oracle:.4f} (ratio {learned / oracle:.3f}); "
                       f"grid c* {c_star:.4f} vs (ln 2 - 2)/2 = {MAD_CENTER_ANALYTIC:.4f}, {elapsed:.0f}s")
    assert ok


# -- 11 ------------------------------------------------------------------------


def test_11_union_volume_proxy(acceptance):
    start = time.time()
    worst = 0.0
    for d in (2, 3, 8):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            u = UnionOfFlows(FrontierConfig(family="union", response_dim=d, n_components=3, hidden_dims=[4],
                                            flow_hidden_dims=[4]), rng)
            perturb(u.parameters(), rng, 0.5)
            X, q = rng.normal(size=(16, 1)), rng.uniform(0.1, 5.0, 16)
            got = volume_surrogate(u, q, X).value
            want = unit_ball_volume(d) * q ** (d / 2)
            worst = max(worst, float(np.max(np.abs(got - want) / want)))
    elapsed = time.time() - start
    ok = worst < 1e-10 and elapsed < 1
    acceptance(11, ok, f"worst relative deviation {worst:.1e} over d in (2, 3, 8), {elapsed:.2f}s")
    assert ok


# -- 12 ------------------------------------------------------------------------


def test_12_determinism(acceptance, tmp_path):
    start = time.time()
    cfg = {"data": {"task": "gauss2d", "n_train": 2000, "n_cal": 1000, "n_test": 2000},
           "frontier": {"hidden_dims": [16], "flow_hidden_dims": [16, 16]},
           "train": {"tau": 0.9, "total_steps": 400, "eval_every": 100},
           "eval": {"mc_points": 20_000, "mc_x": 2, "bins": 5}}
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(cfg))
    files = ("model.slsr", "calibration.json", "report.json")
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        codes = [cli_main(["train", "--config", str(path), "--seed", "3", "--out", str(out)]),
                 cli_main(["calibrate", "--model", str(out / "model.slsr"), "--data", str(out / "cal.csv")]),
                 cli_main(["evaluate", "--model", str(out / "model.slsr"), "--calibration",
                           str(out / "calibration.json"), "--data", str(out / "test.csv"), "--config", str(path)])]
        assert codes == [0, 0, 0]
        runs.append([(out / f).read_bytes() for f in files])
    same = [a == b for a, b in zip(*runs)]
    elapsed = time.time() - start
    ok = all(same) and elapsed < 600
    acceptance(12, ok, ", ".join(f"{f} {'identical' if s else 'DIFFERS'}" for f, s in zip(files, same))
               + f", {elapsed:.0f}s")
    assert ok
