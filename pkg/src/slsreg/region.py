from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .frontiers import FrontierModel, UnionOfFlows, frontier_scores, volume_surrogate
from .quantiles import QuantileNet


@dataclass
class FeatureScaler:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "FeatureScaler":
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 1e-12, std, 1.0))

    def __call__(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std


@dataclass
class PredictionRegion:
    """Trained frontier + quantile net + conformal scale.

    ``C(X) = {y : G(X, y) <= scale * q_tau(X)}``; unions use the hard minimum.
    ``scale = 1`` means uncalibrated deployment.
    """

    frontier: FrontierModel
    quantile_net: QuantileNet
    tau: float
    scaler: FeatureScaler
    scale: float = 1.0

    @property
    def d(self) -> int:
        return self.frontier.d

    def features(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        return self.scaler(X)

    def scores(self, X, Y) -> np.ndarray:
        Y = np.asarray(Y, dtype=np.float64)
        if Y.ndim == 1:
            Y = Y.reshape(-1, self.d)
        return frontier_scores(self.frontier, self.features(X), Y)

    def quantiles(self, X) -> np.ndarray:
        """(n, 3) sorted quantile triple; column 1 is ``q_tau``."""
        return self.quantile_net.predict(self.features(X))

    def base_thresholds(self, X) -> np.ndarray:
        return self.quantiles(X)[:, 1]

    def thresholds(self, X) -> np.ndarray:
        return self.scale * self.base_thresholds(X)

    def contains(self, X, Y) -> np.ndarray:
        return self.scores(X, Y) <= self.thresholds(X)

    def volumes(self, X, log: bool = False) -> np.ndarray:
        """Closed-form region volume per X (sum-of-components proxy for unions)."""
        feats = self.features(X)
        if np.isinf(self.scale):
            return np.full(len(feats), np.inf)
        return volume_surrogate(self.frontier, self.thresholds(X), feats, log=log).value

    def with_scale(self, scale: float) -> "PredictionRegion":
        out = copy.copy(self)
        out.scale = float(scale)
        return out

    @property
    def is_union(self) -> bool:
        return isinstance(self.frontier, UnionOfFlows)


def membership(region: PredictionRegion, X, y) -> np.ndarray:
    """``G(X, y) <= r * q_tau(X)``; the boundary belongs to the set."""
    return region.contains(X, y)
