"""Float tensors with reverse-mode differentiation and the layers built on them."""
from . import kernels, ops
from .gradcheck import GradCheckResult, gradcheck
from .nn import (
    BatchNorm1d,
    Conv1d,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    TransformerEncoderLayer,
)
from .tensor import Tensor, Trace, active_trace, as_tensor, backward

__all__ = [
    "BatchNorm1d",
    "Conv1d",
    "GradCheckResult",
    "LayerNorm",
    "Linear",
    "Module",
    "MultiHeadAttention",
    "Parameter",
    "Tensor",
    "Trace",
    "TransformerEncoderLayer",
    "active_trace",
    "as_tensor",
    "backward",
    "gradcheck",
    "kernels",
    "ops",
]
