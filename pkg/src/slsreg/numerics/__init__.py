from . import autodiff
from .autodiff import DomainError, NonFiniteError, ShapeError, Tensor, backward, tensor
from .nn import Mlp, MlpConfig, mlp_forward
from .optim import Adam, AdamState, adam_step
from .rng import RngStreams

__all__ = [
    "Adam",
    "AdamState",
    "DomainError",
    "Mlp",
    "MlpConfig",
    "NonFiniteError",
    "RngStreams",
    "ShapeError",
    "Tensor",
    "adam_step",
    "autodiff",
    "backward",
    "mlp_forward",
    "tensor",
]
