"""Three-level conditional quantile network trained with the pinball loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numerics import autodiff as ad
from .numerics.autodiff import NonFiniteError, Tensor
from .numerics.nn import Mlp, MlpConfig
from .numerics.optim import Adam

POSITIVITY_EPS = 1e-6


def pinball_loss(level, target, pred):
    """``max(level * (g - q), (level - 1) * (g - q))`` elementwise (numpy)."""
    diff = np.asarray(target, dtype=np.float64) - np.asarray(pred, dtype=np.float64)
    return np.maximum(level * diff, (level - 1.0) * diff)


def pinball_tape(level, target, pred: Tensor) -> Tensor:
    """Differentiable pinball loss; ``level`` may be an array broadcasting against ``pred``."""
    diff = ad.tensor(target) - pred
    slope = np.asarray(level, dtype=np.float64) - (diff.value < 0)
    return diff * slope


@dataclass
class QuantileConfig:
    feature_dim: int = 1
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    use_layer_norm: bool = True
    dropout_rate: float = 0.1


class QuantileNet:
    """Shared MLP backbone with three linear heads (low, target, high).

    Head outputs go through ``exp(raw) + eps`` and are sorted per row, so the
    triple is strictly positive and never crosses.
    """

    def __init__(self, config: QuantileConfig, rng: np.random.Generator):
        self.config = config
        self.net = Mlp(MlpConfig(config.feature_dim, config.hidden_dims, 3, use_layer_norm=config.use_layer_norm,
                                 dropout_rate=config.dropout_rate, zero_init_last_layer=True), rng)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.net.named_parameters("quantile.")

    def parameters(self) -> list[Tensor]:
        return self.net.parameters()

    @property
    def head_bias(self) -> Tensor:
        return self.net.biases[-1]

    def init_from_scores(self, g: np.ndarray, levels) -> None:
        """Start every head at the marginal quantile of ``g`` at its level."""
        q = np.quantile(np.asarray(g, dtype=np.float64), np.sort(np.asarray(levels, dtype=np.float64)))
        self.head_bias.value = np.log(np.maximum(q - POSITIVITY_EPS, 1e-12))

    def raw(self, X, train: bool = False, rng=None) -> Tensor:
        return self.net(X, train, rng)

    def forward(self, X, train: bool = False, rng=None) -> Tensor:
        return quantile_transform(self.raw(X, train, rng))

    def predict(self, X) -> np.ndarray:
        """Eval-mode (n, 3) array of sorted positive quantiles."""
        return self.forward(X).value

    def __call__(self, X, train: bool = False, rng=None) -> Tensor:
        return self.forward(X, train, rng)


def quantile_transform(raw: Tensor) -> Tensor:
    return ad.sort_last(ad.exp(raw) + POSITIVITY_EPS)


def quantile_forward(net: QuantileNet, X) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    q = net.predict(X)
    return q[:, 0], q[:, 1], q[:, 2]


def quantile_loss(net: QuantileNet, X, g, levels, train: bool = False, rng=None) -> Tensor:
    """Mean over the batch of the summed pinball losses of the three heads."""
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("non-finite frontier scores passed to the quantile update")
    q = net.forward(X, train, rng)
    losses = pinball_tape(np.asarray(levels, dtype=np.float64), g.reshape(-1, 1), q)
    return losses.sum(axis=1).mean()


def quantile_update(net: QuantileNet, optimizer: Adam, X, g, levels, train: bool = False, rng=None) -> float:
    """One Adam step on the pinball losses; ``g`` must already be detached from the frontier."""
    loss = quantile_loss(net, X, g, levels, train, rng)
    grads = ad.backward(loss, optimizer.params)
    optimizer.step(grads)
    return float(loss.value)
