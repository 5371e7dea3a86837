"""Minimal reverse-mode tensor engine used by the flow model."""

from .gradcheck import GradCheckReport, NonFiniteError, check_finite, gradient_check
from .optim import AdamW, clip_grad_norm, one_cycle_lr
from .params import (
    CheckpointError,
    Module,
    Parameter,
    init_array,
    load_checkpoint,
    param_rng,
    save_checkpoint,
)
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    bilinear_sample,
    broadcast_to,
    concat,
    conv2d,
    cos,
    custom_op,
    div,
    gelu,
    get_dtype,
    get_precision,
    getitem,
    l1_loss,
    layer_norm,
    matmul,
    mean,
    mul,
    no_grad,
    pad2d,
    precision,
    relu,
    reshape,
    set_precision,
    sigmoid,
    sin,
    softmax,
    stack,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
)
