"""Split-conformal rescaling of a learned region using normalized scores G / q_tau."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .region import PredictionRegion

logger = logging.getLogger(__name__)


@dataclass
class CalibrationResult:
    scale: float
    n_cal: int
    tau: float
    rank: int
    #: fraction of calibration scores <= scale
    achieved_level: float

    def to_json(self) -> str:
        d = asdict(self)
        d["scale"] = "inf" if math.isinf(self.scale) else self.scale
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationResult":
        d = json.loads(text)
        d = {k: d[k] for k in ("scale", "n_cal", "tau", "rank", "achieved_level")}
        d["scale"] = float(d["scale"])
        return cls(**d)


def conformal_rank(n_cal: int, tau: float) -> int:
    # the small slack keeps e.g. 10 * 0.9 from rounding up to 10.000000000000002 -> 11
    return math.ceil((n_cal + 1) * tau - 1e-9)


def conformal_scale(normalized_scores, tau: float) -> tuple[float, int]:
    """Order statistic of rank ``ceil((n + 1) tau)``; ``inf`` when the rank exceeds ``n``."""
    s = np.sort(np.asarray(normalized_scores, dtype=np.float64).ravel())
    n = len(s)
    if n == 0:
        raise ValueError("empty calibration set")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    k = conformal_rank(n, tau)
    if k > n:
        logger.warning("conformal rank %d exceeds n_cal=%d; returning an infinite scale", k, n)
        return math.inf, k
    return float(s[k - 1]), k


def normalized_scores(region: PredictionRegion, X, Y) -> np.ndarray:
    return region.scores(X, Y) / region.base_thresholds(X)


def calibrate(region: PredictionRegion, X, Y, tau: float | None = None) -> CalibrationResult:
    tau = region.tau if tau is None else tau
    if len(np.asarray(Y)) == 0:
        raise ValueError("empty calibration set")
    s = normalized_scores(region, X, Y)
    r, k = conformal_scale(s, tau)
    return CalibrationResult(scale=r, n_cal=len(s), tau=tau, rank=k, achieved_level=float(np.mean(s <= r)))


def apply_calibration(region: PredictionRegion, result: CalibrationResult) -> PredictionRegion:
    return region.with_scale(result.scale)


def marginal_coverage_test(region: PredictionRegion, X, Y) -> float:
    return float(np.mean(region.contains(X, Y)))
