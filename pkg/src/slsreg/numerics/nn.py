"""Multilayer perceptron built on the autodiff tape.

Hidden block: linear -> layer norm (with affine) -> ReLU -> dropout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

_ACTIVATIONS = {
    "relu": ad.relu,
    "softplus": ad.softplus,
    "sigmoid": ad.sigmoid,
}


@dataclass
class MlpConfig:
    input_dim: int
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    output_dim: int = 1
    use_layer_norm: bool = True
    dropout_rate: float = 0.0
    activation: str = "relu"
    zero_init_last_layer: bool = False

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if min([self.input_dim, self.output_dim, *self.hidden_dims]) < 1:
            raise ValueError("all MLP dimensions must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


class Mlp:
    def __init__(self, config: MlpConfig, rng: np.random.Generator):
        self.config = config
        dims = [config.input_dim, *config.hidden_dims, config.output_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        self.gains: list[Tensor] = []
        self.shifts: list[Tensor] = []
        n_layers = len(dims) - 1
        for i in range(n_layers):
            last = i == n_layers - 1
            if last and config.zero_init_last_layer:
                w = np.zeros((dims[i], dims[i + 1]))
            else:
                w = glorot_uniform(rng, dims[i], dims[i + 1])
            self.weights.append(Tensor(w, requires_grad=True))
            self.biases.append(Tensor(np.zeros(dims[i + 1]), requires_grad=True))
            if not last and config.use_layer_norm:
                self.gains.append(Tensor(np.ones(dims[i + 1]), requires_grad=True))
                self.shifts.append(Tensor(np.zeros(dims[i + 1]), requires_grad=True))

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out.append((f"{prefix}w{i}", w))
            out.append((f"{prefix}b{i}", b))
            if i < len(self.gains):
                out.append((f"{prefix}ln_gain{i}", self.gains[i]))
                out.append((f"{prefix}ln_shift{i}", self.shifts[i]))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def __call__(self, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return mlp_forward(self, x, train=train, rng=rng)


def mlp_forward(mlp: Mlp, x, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
    cfg = mlp.config
    h = ad.tensor(x)
    if h.ndim != 2 or h.shape[1] != cfg.input_dim:
        raise ShapeError(f"MLP expects (n, {cfg.input_dim}) input, got {h.shape}")
    act = _ACTIVATIONS[cfg.activation]
    n_layers = len(mlp.weights)
    for i in range(n_layers):
        h = h @ mlp.weights[i] + mlp.biases[i]
        if i == n_layers - 1:
            break
        if cfg.use_layer_norm:
            h = ad.layer_norm(h) * mlp.gains[i] + mlp.shifts[i]
        h = act(h)
        h = ad.dropout(h, cfg.dropout_rate, train, rng)
    return h
