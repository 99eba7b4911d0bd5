"""Coverage, volume and conditional-coverage metrics for a prediction region."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from ..region import PredictionRegion
from .tasks import SyntheticTask, task_rng

logger = logging.getLogger(__name__)


@dataclass
class EvalConfig:
    mc_points: int = 200_000
    mc_x: int = 5
    n_x: int = 200
    m_c: int = 2000
    bins: int = 10
    box_factor: float = 3.0
    seed: int = 0


@dataclass
class EvalReport:
    tau: float
    n_test: int
    marginal_coverage: float
    mean_volume: float
    scaled_volume: float
    mc_volume: float | None = None
    mc_volume_stderr: float | None = None
    surrogate_volume_on_mc_x: float | None = None
    conditional_deviation: float | None = None
    conditional_method: str | None = None
    notes: list[str] = field(default_factory=list)
    per_x: list[dict] = field(default_factory=list)

    def to_dict(self, with_per_x: bool = False) -> dict:
        d = asdict(self)
        if not with_per_x:
            d.pop("per_x")
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def write_per_x_csv(self, path) -> None:
        if not self.per_x:
            return
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(self.per_x[0]))
            writer.writeheader()
            writer.writerows(self.per_x)


def bounding_box(Y: np.ndarray, factor: float = 3.0) -> np.ndarray:
    """Box centred on the data range with ``factor`` times its width."""
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    mid, half = 0.5 * (lo + hi), 0.5 * factor * np.maximum(hi - lo, 1e-9)
    return np.stack([mid - half, mid + half], axis=1)


def monte_carlo_volume(region: PredictionRegion, x: np.ndarray, box: np.ndarray, n_points: int,
                       rng: np.random.Generator, chunk: int = 50_000) -> tuple[float, float]:
    """Hit-or-miss volume of the region at a single feature vector ``x``.

    Returns ``(estimate, standard error)``.
    """
    box_vol = float(np.prod(box[:, 1] - box[:, 0]))
    hits = 0
    done = 0
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    while done < n_points:
        m = min(chunk, n_points - done)
        pts = rng.uniform(box[:, 0], box[:, 1], size=(m, box.shape[0]))
        hits += int(region.contains(np.repeat(x, m, axis=0), pts).sum())
        done += m
    p = hits / n_points
    if hits == 0:
        logger.warning("Monte-Carlo volume: no hits in %d points; reporting 0", n_points)
    return p * box_vol, math.sqrt(p * (1 - p) / n_points) * box_vol


def conditional_deviation_oracle(region: PredictionRegion, task: SyntheticTask, tau: float,
                                 n_x: int, m_c: int, rng: np.random.Generator) -> tuple[float, list[dict]]:
    """``mean_X |P(Y in C(X) | X) - tau|`` with fresh draws from the true conditional."""
    xs = task.sample_x(n_x, rng)
    rows = []
    devs = []
    for x in xs:
        Xr = np.repeat(x.reshape(1, -1), m_c, axis=0)
        Yr = task.sample_y(Xr, rng)
        cov = float(region.contains(Xr, Yr).mean())
        vol = float(region.volumes(x.reshape(1, -1))[0])
        devs.append(abs(cov - tau))
        rows.append({"x0": float(x[0]), "coverage": cov, "volume": vol})
    return float(np.mean(devs)), rows


def conditional_deviation_binned(region: PredictionRegion, X, Y, tau: float, bins: int = 10) -> float:
    """Coverage deviation averaged over equal-mass bins of the first principal feature direction."""
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Z = region.features(X)
    Z = Z - Z.mean(axis=0)
    if Z.shape[1] > 1:
        _, _, vt = np.linalg.svd(Z, full_matrices=False)
        proj = Z @ vt[0]
    else:
        proj = Z[:, 0]
    inside = region.contains(X, Y)
    order = np.argsort(proj, kind="stable")
    return float(np.mean([abs(inside[chunk].mean() - tau) for chunk in np.array_split(order, bins) if len(chunk)]))


def evaluate(region: PredictionRegion, X, Y, tau: float | None = None, task: SyntheticTask | None = None,
             config: EvalConfig | None = None) -> EvalReport:
    tau = region.tau if tau is None else tau
    config = config or EvalConfig()
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=np.float64).reshape(len(Y), -1)
    d = Y.shape[1]
    coverage = float(region.contains(X, Y).mean())
    vols = region.volumes(X)
    report = EvalReport(tau=tau, n_test=len(Y), marginal_coverage=coverage, mean_volume=float(np.mean(vols)),
                        scaled_volume=float(np.mean(vols ** (1.0 / d))))
    if region.is_union:
        report.notes.append("volumes use the sum-of-components proxy; Monte-Carlo accounts for overlap")

    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(7,)))
    if config.mc_x > 0 and config.mc_points > 0 and math.isfinite(region.scale):
        box = bounding_box(Y, config.box_factor)
        uniq = np.unique(X, axis=0)
        pick = uniq[rng.choice(len(uniq), size=min(config.mc_x, len(uniq)), replace=False)]
        est, se = zip(*(monte_carlo_volume(region, x, box, config.mc_points, rng) for x in pick))
        report.mc_volume = float(np.mean(est))
        report.mc_volume_stderr = float(math.sqrt(np.sum(np.square(se))) / len(se))
        report.surrogate_volume_on_mc_x = float(np.mean(region.volumes(pick)))

    if task is not None and config.n_x > 0:
        trng = task_rng(task, config.seed, "conditional")
        report.conditional_deviation, report.per_x = conditional_deviation_oracle(
            region, task, tau, config.n_x, config.m_c, trng)
        report.conditional_method = "oracle_sampling"
    elif config.bins > 0:
        report.conditional_deviation = conditional_deviation_binned(region, X, Y, tau, config.bins)
        report.conditional_method = f"binned_{config.bins}_principal_direction (coarser than a classifier-based estimate)"
    return report
