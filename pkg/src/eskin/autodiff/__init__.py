"""Small numpy reverse-mode autodiff and optimizer stack."""

from eskin.autodiff.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from eskin.autodiff.gradcheck import GradCheckReport, grad_check, module_grad_check
from eskin.autodiff.optim import AdamState, adam_step, lr_schedule
from eskin.autodiff.tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    dropout,
    layer_norm,
    linear,
    matmul,
    mean_squared_error,
    no_grad,
    relu,
    scaled_dot_product_attention,
    softmax,
    softmax_cross_entropy,
)

__all__ = [
    "AdamState",
    "CheckpointError",
    "GradCheckReport",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "concat",
    "dropout",
    "grad_check",
    "module_grad_check",
    "layer_norm",
    "linear",
    "load_checkpoint",
    "lr_schedule",
    "matmul",
    "mean_squared_error",
    "no_grad",
    "relu",
    "save_checkpoint",
    "scaled_dot_product_attention",
    "softmax",
    "softmax_cross_entropy",
]
