"""Minimal reverse-mode autodiff over dense numpy arrays."""

from .conv import conv3d, conv_transpose3d
from .gradcheck import grad_check, grad_check_report, numerical_gradient, relative_error
from .ops import (
    add,
    concat_channels,
    div,
    dropout,
    exp,
    group_norm,
    mul,
    neg,
    prelu,
    reshape,
    sigmoid,
    slice_axis,
    softmax_channels,
    sub,
)
from .ops import sum as tsum
from .tensor import Graph, Node, Tensor, backward, current_graph, is_grad_enabled, no_grad

__all__ = [
    "Graph",
    "Node",
    "Tensor",
    "add",
    "backward",
    "concat_channels",
    "conv3d",
    "conv_transpose3d",
    "current_graph",
    "div",
    "dropout",
    "exp",
    "grad_check",
    "grad_check_report",
    "group_norm",
    "is_grad_enabled",
    "mul",
    "neg",
    "no_grad",
    "numerical_gradient",
    "prelu",
    "relative_error",
    "reshape",
    "sigmoid",
    "slice_axis",
    "softmax_channels",
    "sub",
    "tsum",
]
