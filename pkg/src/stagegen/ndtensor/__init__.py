"""Small reverse-mode autodiff core covering the layers the GAN stages need."""

from . import functional
from .functional import (
    add,
    batch_norm2d,
    bce_with_logits,
    concat,
    conv2d,
    conv_transpose2d,
    dropout,
    instance_norm2d,
    l1_loss,
    leaky_relu,
    linear,
    mean,
    mul,
    reflect_pad2d,
    relu,
    reshape,
    sigmoid,
    sub,
    tanh,
)
from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import ShapeError, Tensor, is_grad_enabled, no_grad

__all__ = [
    "Adam", "AdamState", "ShapeError", "Tensor", "add", "adam_step", "batch_norm2d",
    "bce_with_logits", "concat", "conv2d", "conv_transpose2d", "dropout", "functional",
    "grad_check", "instance_norm2d", "is_grad_enabled", "l1_loss", "leaky_relu", "linear",
    "mean", "mul", "no_grad", "reflect_pad2d", "relu", "reshape", "sigmoid", "sub", "tanh",
]
