"""Minimal dense-tensor engine with reverse-mode autodiff."""

from . import kernels
from .core import (
    OPS, ContractError, DimensionError, Graph, NumericError, Tensor, abs_, add, avg_pool2, backward,
    blur_matrix, clip, concat, concat_channels, conv2d_1x1, conv2d_3x3, current_graph, div, exp,
    forward_op, gaussian_blur, getitem, l1_norm, l2_norm, laplacian, layer_norm_channels, linear, log,
    matmul, mean, mul, nearest_upsample2, no_grad, power, relu, reset_graph, reshape, scalar_mul,
    sigmoid, silu, softmax, softplus, sqrt, stack, sub, sum_, tanh, tensor, transpose, zero_grads,
)
from .gradcheck import GradCheckReport, grad_check
from .hdt import HdtFormatError

__all__ = [name for name in dir() if not name.startswith("_")]
