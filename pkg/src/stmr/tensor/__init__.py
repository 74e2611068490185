"""Numpy-backed tensors with reverse-mode differentiation."""

from . import ops
from .checkpoint import load_records, save_records
from .core import Tensor, as_tensor, backward, get_default_dtype, no_grad, precision, set_default_dtype
from .gradcheck import check_gradients, check_gradients_joint, numerical_gradient, relative_error
from .nn import MLP, Conv2d, LayerNorm, Linear, Module, Parameter
from .ops import (bilinear_sample, concat, conv2d, gather_rows, gelu, layer_norm, linear, matmul,
                  softmax_lastdim, sparse_apply, upsample2x)
from .optim import Adam, OptimizerState, adam_step, step_lr

__all__ = [
    "Adam", "Conv2d", "LayerNorm", "Linear", "MLP", "Module", "OptimizerState", "Parameter", "Tensor",
    "adam_step", "as_tensor", "backward", "bilinear_sample", "check_gradients", "check_gradients_joint",
    "concat", "conv2d", "gather_rows", "gelu", "get_default_dtype", "layer_norm", "linear", "load_records",
    "matmul", "no_grad", "numerical_gradient", "ops", "precision", "relative_error", "save_records",
    "set_default_dtype", "softmax_lastdim", "sparse_apply", "step_lr", "upsample2x",
]
