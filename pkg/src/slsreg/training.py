"""Alternating frontier / quantile optimization with a shrinking quantile window.

Each step samples a minibatch, takes one Adam step on the frontier loss
(unweighted during warm-up, gated by the quantile window afterwards), then one
Adam step on the pinball losses of the quantile heads at the current window
levels.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from . import conformal
from .frontiers import (
    FrontierConfig,
    FrontierModel,
    FrontierOutput,
    NormFrontier,
    UnionOfFlows,
    build_frontier,
    frontier_scores,
)
from .numerics import autodiff as ad
from .numerics.autodiff import NonFiniteError, Tensor
from .numerics.optim import Adam
from .numerics.rng import RngStreams
from .quantiles import QuantileConfig, QuantileNet, quantile_update
from .region import FeatureScaler, PredictionRegion

logger = logging.getLogger(__name__)

OBJECTIVES = ("auto", "volume", "log_volume", "identity")
GATES = ("window", "cvar")
_LEVEL_MARGIN = 1e-3


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: "Checkpoint | None" = None):
        super().__init__(message)
        self.checkpoint = checkpoint


# ---------------------------------------------------------------------------
# shrinking window
# ---------------------------------------------------------------------------


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class MarginSchedule:
    """Annealed logistic decay from ``error_init`` to ``error_min`` (one side of the window)."""

    error_init: float
    error_min: float
    steepness: float
    center: float

    def __call__(self, t: float) -> float:
        t = max(float(t), 0.0)
        k, t0 = self.steepness, self.center
        s0 = _sigmoid(-k * t0)
        frac = (_sigmoid(k * (t - t0)) - s0) / (1.0 - s0)
        return self.error_init + (self.error_min - self.error_init) * frac


@dataclass
class WindowSchedule:
    tau: float
    warmup_steps: int
    low: MarginSchedule
    high: MarginSchedule

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        for side in (self.low, self.high):
            if side.error_min <= 0:
                raise ValueError("window floor margins must be strictly positive")

    @classmethod
    def default(cls, tau: float, total_steps: int, warmup_steps: int | None = None,
                error_init: float | None = None, error_min: float = 0.03,
                steepness: float | None = None, center: float | None = None) -> "WindowSchedule":
        n0 = int(0.3 * total_steps) if warmup_steps is None else int(warmup_steps)
        init = 0.8 * min(tau, 1.0 - tau) if error_init is None else error_init
        t0 = 0.3 * max(total_steps - n0, 1) if center is None else center
        k = 10.0 / t0 if steepness is None else steepness
        side = MarginSchedule(init, min(error_min, init), k, t0)
        return cls(tau, n0, side, copy.copy(side))

    def bounds(self, step: int) -> tuple[float, float]:
        """``(phi, psi)`` at training step ``step``, clipped to keep levels inside (0, 1)."""
        t = step - self.warmup_steps
        phi = min(self.low(t), self.tau - _LEVEL_MARGIN)
        psi = min(self.high(t), 1.0 - self.tau - _LEVEL_MARGIN)
        return phi, psi

    def levels(self, step: int) -> tuple[float, float, float]:
        phi, psi = self.bounds(step)
        return self.tau - phi, self.tau, self.tau + psi


def window_bounds(schedule: WindowSchedule, step: int) -> tuple[float, float]:
    return schedule.bounds(step)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    tau: float = 0.9
    total_steps: int = 20000
    warmup_steps: int | None = None
    batch_size: int = 256
    lr_frontier: float = 1e-3
    lr_quantile: float = 1e-3
    objective: str = "auto"
    gate: str = "window"
    error_init: float | None = None
    error_min: float = 0.03
    steepness: float | None = None
    center: float | None = None
    beta_init: float = 1.0
    beta_max: float = 1e3
    freeze_fraction: float = 0.25
    eval_every: int = 200
    val_fraction: float = 0.2
    refine_steps: int | None = None
    lr_refine: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError("tau must lie in (0, 1)")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if self.gate not in GATES:
            raise ValueError(f"gate must be one of {GATES}")
        if self.warmup_steps is not None and not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("warmup_steps must satisfy 0 <= n0 < total_steps")

    @property
    def resolved_warmup(self) -> int:
        return int(0.3 * self.total_steps) if self.warmup_steps is None else int(self.warmup_steps)

    @property
    def resolved_refine_steps(self) -> int:
        return max(self.total_steps // 5, 1) if self.refine_steps is None else int(self.refine_steps)

    def schedule(self) -> WindowSchedule:
        return WindowSchedule.default(self.tau, self.total_steps, self.resolved_warmup, self.error_init,
                                      self.error_min, self.steepness, self.center)

    def unfreeze_step(self) -> int:
        n0 = self.resolved_warmup
        return n0 + int(self.freeze_fraction * (self.total_steps - n0))

    def beta_at(self, step: int) -> float:
        """Geometric annealing over the first half of the post-unfreeze phase."""
        start = self.unfreeze_step()
        if step <= start:
            return self.beta_init
        span = max((self.total_steps - start) // 2, 1)
        frac = min((step - start) / span, 1.0)
        return self.beta_init * (self.beta_max / self.beta_init) ** frac


# ---------------------------------------------------------------------------
# objectives and the frontier loss
# ---------------------------------------------------------------------------

ObjectiveFn = Callable[[Tensor, Tensor, FrontierOutput], Tensor]


def make_objective(model: FrontierModel, name: str, custom: Callable | None = None) -> ObjectiveFn:
    """``h_G(t, X)`` evaluated at ``t = G(X, Y)``.

    ``custom`` overrides ``name`` and is called as ``custom(t, X)``.
    """
    if custom is not None:
        return lambda t, X, terms: custom(t, X)
    if name == "auto":
        name = "log_volume" if model.d >= 5 else "volume"
    if name == "volume":
        return lambda t, X, terms: model.volume_from(t, terms)
    if name == "log_volume":
        return lambda t, X, terms: model.volume_from(t, terms, log=True)
    if name == "identity":
        return lambda t, X, terms: t
    raise ValueError(f"unknown objective {name!r}")


@dataclass
class LossInfo:
    loss: Tensor
    scores: np.ndarray
    in_window: int
    batch: int


def surrogate_loss(model: FrontierModel, quantile_net: QuantileNet, X, Y, step: int,
                   schedule: WindowSchedule, objective: ObjectiveFn, gate: str = "window",
                   train: bool = False, rng=None) -> LossInfo:
    """Frontier loss for one minibatch.

    Up to the warm-up step it is the plain mean of ``h_G``.  Afterwards each
    sample is kept only if ``q_low(X) <= G(X, Y) <= q_high(X)`` (or
    ``G >= q_tau`` for the ``cvar`` gate); quantiles are constants here.  The
    mean is still taken over the full batch.
    """
    X = ad.tensor(X)
    out = model.forward(X, Y, train, rng)
    h = objective(out.score, X, out)
    n = out.score.shape[0]
    if step <= schedule.warmup_steps:
        return LossInfo(h.mean(), out.score.value, n, n)
    q = quantile_net.predict(X.value)
    g = out.score.value
    if gate == "window":
        keep = (q[:, 0] <= g) & (g <= q[:, 2])
    else:
        keep = g >= q[:, 1]
    loss = (h * keep.astype(np.float64)).sum() * (1.0 / n)
    return LossInfo(loss, g, int(keep.sum()), n)


# ---------------------------------------------------------------------------
# training driver
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    step: int
    values: list[np.ndarray]
    beta: float | None
    weights_frozen: bool | None
    val_adjusted_volume: float
    val_scale: float


@dataclass
class TrainResult:
    region: PredictionRegion
    log: list[dict]
    best: Checkpoint
    empty_window_steps: int
    warmup_region: PredictionRegion | None = None

    def log_lines(self) -> str:
        return "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in self.log)


def split_train_val(X, Y, val_fraction: float, rng: np.random.Generator):
    n = len(Y)
    perm = rng.permutation(n)
    n_val = max(int(round(val_fraction * n)), 1)
    val, tr = perm[:n_val], perm[n_val:]
    return X[tr], Y[tr], X[val], Y[val]


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(-1, 1) if a.ndim == 1 else a


def _all_parameters(region: PredictionRegion):
    return region.frontier.parameters() + region.quantile_net.parameters()


def _snapshot(region: PredictionRegion, step: int, adj_vol: float, r: float) -> Checkpoint:
    f = region.frontier
    return Checkpoint(step, [p.value.copy() for p in _all_parameters(region)], getattr(f, "beta", None),
                      getattr(f, "weights_frozen", None), adj_vol, r)


def _restore(region: PredictionRegion, ckpt: Checkpoint) -> None:
    for p, v in zip(_all_parameters(region), ckpt.values):
        p.value = v.copy()
    if isinstance(region.frontier, UnionOfFlows):
        region.frontier.beta = ckpt.beta
        region.frontier.weights_frozen = ckpt.weights_frozen


def validation_metrics(region: PredictionRegion, Xv, Yv) -> dict:
    """Raw coverage and the volume after rescaling to exact validation coverage."""
    s = conformal.normalized_scores(region, Xv, Yv)
    r, _ = conformal.conformal_scale(s, region.tau)
    cov = float(np.mean(s <= 1.0))
    if math.isinf(r):
        return {"val_coverage": cov, "val_scale": r, "val_adjusted_volume": math.inf}
    vol = float(np.mean(region.with_scale(r).volumes(Xv)))
    return {"val_coverage": cov, "val_scale": r, "val_adjusted_volume": vol}


def refine_quantiles(region: PredictionRegion, Xs, Y, steps: int, lr: float, batch_size: int,
                     levels, rng: np.random.Generator, dropout_rng=None) -> None:
    """Extra pinball-loss training of the quantile heads with the frontier frozen."""
    if steps <= 0:
        return
    g = frontier_scores(region.frontier, Xs, Y)
    opt = Adam(region.quantile_net.parameters(), lr=lr)
    n = len(g)
    order = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        quantile_update(region.quantile_net, opt, Xs[idx], g[idx], levels, train=dropout_rng is not None,
                        rng=dropout_rng)


def train(X, Y, config: TrainConfig, frontier_config: FrontierConfig,
          quantile_config: QuantileConfig | None = None, X_val=None, Y_val=None,
          custom_objective: Callable | None = None, keep_warmup_region: bool = False) -> TrainResult:
    """Run the alternating scheme and return the best validation checkpoint.

    Without explicit validation data, ``config.val_fraction`` of ``(X, Y)`` is
    held out.  The returned region is uncalibrated (scale 1).
    """
    X, Y = _as_2d(X), _as_2d(Y)
    streams = RngStreams(config.seed)
    if X_val is None:
        X, Y, X_val, Y_val = split_train_val(X, Y, config.val_fraction, streams["split"])
    X_val, Y_val = _as_2d(X_val), _as_2d(Y_val)
    if frontier_config.response_dim != Y.shape[1] or frontier_config.feature_dim != X.shape[1]:
        raise ValueError(f"frontier config dims ({frontier_config.feature_dim}, {frontier_config.response_dim}) "
                         f"do not match data ({X.shape[1]}, {Y.shape[1]})")

    scaler = FeatureScaler.fit(X)
    Xs = scaler(X)
    init_rng = streams["init"]
    frontier = build_frontier(frontier_config, init_rng)
    frontier.init_from_data(Xs, Y, init_rng)
    if quantile_config is None:
        quantile_config = QuantileConfig(feature_dim=X.shape[1], hidden_dims=list(frontier_config.hidden_dims),
                                         use_layer_norm=frontier_config.use_layer_norm)
    qnet = QuantileNet(quantile_config, init_rng)
    region = PredictionRegion(frontier, qnet, config.tau, scaler)

    schedule = config.schedule()
    n0 = schedule.warmup_steps
    is_union = isinstance(frontier, UnionOfFlows)
    if is_union:
        frontier.weights_frozen = True
        frontier.beta = config.beta_init
    qnet.init_from_scores(frontier.forward(Xs, Y).score.value, schedule.levels(n0))

    objective = make_objective(frontier, config.objective, custom_objective)
    opt_f = Adam(frontier.parameters(), lr=config.lr_frontier)
    opt_q = Adam(qnet.parameters(), lr=config.lr_quantile)
    shuffle = streams["shuffle"]
    dropout_rng = streams["dropout"]
    use_dropout = frontier_config.dropout_rate > 0 or quantile_config.dropout_rate > 0

    n = len(Y)
    bs = min(config.batch_size, n)
    order, pos = shuffle.permutation(n), 0
    log: list[dict] = []
    best: Checkpoint | None = None
    warmup_region = None
    empty_steps = 0
    run_loss, run_frac, run_count = 0.0, 0.0, 0

    for step in range(1, config.total_steps + 1):
        if is_union:
            if frontier.weights_frozen and step > config.unfreeze_step():
                frontier.weights_frozen = False
            frontier.beta = config.beta_at(step)
        if pos + bs > n:
            order, pos = shuffle.permutation(n), 0
        idx = order[pos:pos + bs]
        pos += bs
        xb, yb = Xs[idx], Y[idx]
        levels = schedule.levels(step)

        try:
            info = surrogate_loss(frontier, qnet, xb, yb, step, schedule, objective, config.gate,
                                  train=use_dropout, rng=dropout_rng)
            if info.in_window == 0:
                empty_steps += 1
            else:
                grads = ad.backward(info.loss, opt_f.params)
                opt_f.step(grads)
            g = info.scores if not use_dropout else frontier.forward(xb, yb).score.value
            quantile_update(qnet, opt_q, xb, g, levels, train=use_dropout, rng=dropout_rng)
        except NonFiniteError as exc:
            raise TrainingDiverged(f"training diverged at step {step}: {exc}", best) from exc

        run_loss += float(info.loss.value)
        run_frac += info.in_window / info.batch
        run_count += 1

        if keep_warmup_region and step == n0:
            warmup_region = copy.deepcopy(region)
        if step % config.eval_every == 0 or step == config.total_steps:
            metrics = validation_metrics(region, X_val, Y_val)
            phi, psi = schedule.bounds(step)
            rec = {"step": step, "theta_loss": run_loss / run_count, "in_window_fraction": run_frac / run_count,
                   "phi": phi, "psi": psi, "beta": getattr(frontier, "beta", None), **metrics}
            log.append(rec)
            logger.info("step %d loss %.5g window %.3f val_cov %.3f val_vol %.5g", step, rec["theta_loss"],
                        rec["in_window_fraction"], metrics["val_coverage"], metrics["val_adjusted_volume"])
            run_loss, run_frac, run_count = 0.0, 0.0, 0
            vol = metrics["val_adjusted_volume"]
            if best is None or vol < best.val_adjusted_volume:
                best = _snapshot(region, step, vol, metrics["val_scale"])

    _restore(region, best)
    refine_levels = schedule.levels(config.total_steps * 10)
    refine_quantiles(region, Xs, Y, config.resolved_refine_steps, config.lr_refine or config.lr_quantile,
                     bs, refine_levels, streams["refine"])
    if warmup_region is not None:
        refine_quantiles(warmup_region, Xs, Y, config.resolved_refine_steps,
                         config.lr_refine or config.lr_quantile, bs, refine_levels, streams["refine_warmup"])
    if empty_steps:
        logger.warning("%d steps had an empty quantile window; their frontier update was skipped", empty_steps)
    return TrainResult(region, log, best, empty_steps, warmup_region)


# ---------------------------------------------------------------------------
# baselines and the generalized-objective demo
# ---------------------------------------------------------------------------


def gaussian_nll_baseline(X, Y, config: TrainConfig, frontier_config: FrontierConfig,
                          X_val=None, Y_val=None) -> PredictionRegion:
    """Rigid-ellipsoid region fitted by ``E[-log det L(X) + ||L(X)(Y - f(X))||^2]``.

    The threshold network is left constant; the region is scaled to ``tau``
    coverage on the validation split.
    """
    X, Y = _as_2d(X), _as_2d(Y)
    streams = RngStreams(config.seed)
    if X_val is None:
        X, Y, X_val, Y_val = split_train_val(X, Y, config.val_fraction, streams["split"])
    fcfg = FrontierConfig(**{**asdict(frontier_config), "family": "flow", "identity_flow": True, "unit_det": False})
    scaler = FeatureScaler.fit(X)
    Xs = scaler(X)
    rng = streams["init"]
    frontier = build_frontier(fcfg, rng)
    frontier.init_from_data(Xs, Y, rng)
    qnet = QuantileNet(QuantileConfig(feature_dim=X.shape[1], hidden_dims=[8]), rng)
    opt = Adam(frontier.parameters(), lr=config.lr_frontier)
    shuffle = streams["shuffle"]
    n = len(Y)
    bs = min(config.batch_size, n)
    order, pos = shuffle.permutation(n), 0
    for step in range(config.total_steps):
        if pos + bs > n:
            order, pos = shuffle.permutation(n), 0
        idx = order[pos:pos + bs]
        pos += bs
        out = frontier.forward(Xs[idx], Y[idx])
        loss = (out.score - out.log_det).mean()
        opt.step(ad.backward(loss, opt.params))
    region = PredictionRegion(frontier, qnet, config.tau, scaler)
    cal = conformal.calibrate(region, _as_2d(X_val), _as_2d(Y_val))
    return region.with_scale(cal.scale)


def mad_objective_demo(X, Y, config: TrainConfig, frontier_config: FrontierConfig | None = None,
                       X_val=None, Y_val=None) -> tuple[PredictionRegion, TrainResult]:
    """Fit ``f`` minimizing ``E_X[median |Y - f(X)|]`` via the windowed scheme.

    Uses the frontier ``|Y - f(X)|``, the objective ``h(t, X) = t`` and
    ``tau = 0.5``.  Returns the region (whose center net is ``f``) and the run.
    """
    X, Y = _as_2d(X), _as_2d(Y)
    if Y.shape[1] != 1:
        raise ValueError("the median-absolute-deviation demo needs a scalar response")
    cfg = TrainConfig(**{**asdict(config), "tau": 0.5, "objective": "identity"})
    fcfg = frontier_config or FrontierConfig(family="norm", response_dim=1, feature_dim=X.shape[1])
    if fcfg.family != "norm":
        raise ValueError("the median-absolute-deviation demo uses the norm frontier")
    result = train(X, Y, cfg, fcfg, X_val=X_val, Y_val=Y_val)
    return result.region, result


def center_function(region: PredictionRegion) -> Callable[[np.ndarray], np.ndarray]:
    if not isinstance(region.frontier, NormFrontier):
        raise TypeError("center_function needs a norm frontier")
    return lambda X: region.frontier.center(region.features(X)).value
