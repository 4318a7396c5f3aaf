from . import functional
from .functional import DropoutMask, dropout
from .gradcheck import gradcheck, numeric_grad, relative_error
from .rng import RngStream, derive_stream_id
from .tensor import (
    REGISTRY,
    Op,
    ShapeError,
    Tensor,
    allocation_count,
    backward,
    default_dtype,
    forward_op,
    grad_enabled,
    no_grad,
    precision,
    tensor,
)

__all__ = [
    "REGISTRY",
    "DropoutMask",
    "Op",
    "RngStream",
    "ShapeError",
    "Tensor",
    "allocation_count",
    "backward",
    "default_dtype",
    "derive_stream_id",
    "dropout",
    "forward_op",
    "functional",
    "grad_enabled",
    "gradcheck",
    "no_grad",
    "numeric_grad",
    "precision",
    "relative_error",
    "tensor",
]
