"""Minimal dense tensors, reverse-mode autodiff and neural primitives."""

from . import flops
from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .functional import (
    batch_norm,
    conv2d,
    conv3d,
    cross_entropy,
    l2_normalize,
    linear,
    log_softmax,
    max_pool2d,
    softmax,
    spatial_max_pool,
    temporal_avg_pool,
)
from .gradcheck import GradcheckReport, check_tensors, gradcheck
from .nn import BatchNorm, Conv, Linear, Module, Parameter
from .tensor import (
    Tensor,
    add,
    amax,
    as_tensor,
    backward,
    concat,
    corrupt_backward,
    default_dtype,
    div,
    exp,
    get_default_dtype,
    getitem,
    log,
    matmul,
    mean,
    mul,
    no_grad,
    pad_zeros,
    power,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    slice_axis,
    stack,
    sub,
    sum_,
    transpose,
)
