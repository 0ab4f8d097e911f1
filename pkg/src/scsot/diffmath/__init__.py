"""Minimal float64 reverse-mode autodiff on numpy arrays."""

from .core import Tensor, as_tensor, backward, grad_enabled, no_grad
from .gradcheck import GradcheckReport, gradcheck, leaf, relative_error
from .ops import (
    BCE_EPS,
    PRIMITIVES,
    add,
    binary_cross_entropy,
    blend,
    concat,
    cross_entropy_logits,
    depthwise_conv1d,
    embedding_lookup,
    gelu,
    layer_norm,
    linear,
    lstm_step,
    matmul,
    mean,
    mul,
    primitive_forward,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    sub,
    sum_,
    swap_last,
    tanh,
    transpose,
)
from .params import Parameter, ParameterSet, load_checkpoint, save_checkpoint
