from . import functional
from .checkpoint import load_archive, save_archive
from .modules import (
    BatchNorm1d,
    Conv1d,
    GroupNorm,
    LayerNorm,
    Linear,
    Mlp,
    Module,
    MultiHeadAttention,
    Parameter,
    TransformerBlock,
)
from .optim import Adam
from .tensor import Tensor, as_tensor, concat, no_grad, precision, stack

__all__ = [
    "functional", "load_archive", "save_archive", "BatchNorm1d", "Conv1d", "GroupNorm",
    "LayerNorm", "Linear", "Mlp", "Module", "MultiHeadAttention", "Parameter",
    "TransformerBlock", "Adam", "Tensor", "as_tensor", "concat", "no_grad", "precision", "stack",
]
