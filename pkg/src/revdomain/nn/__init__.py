"""Minimal float64 tensor engine: reverse-mode autodiff, layers, SGD, checkpoints."""
from .checkpoint import CheckpointError, assign_params, load_params, save_params
from .gradcheck import grad_check
from .layers import (
    conv2d,
    fully_connected,
    he_uniform,
    log_softmax_2class,
    max_pool_2x2,
    pooling_matrix,
    residual_block,
    segment_mean,
    softmax_2class,
    zeros,
)
from .optim import NonFiniteGradientError, SgdConfig, sgd_step
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    clamp_min,
    dot,
    leaky_relu,
    log,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    smooth_clamp,
    tabs,
    take,
    tsum,
    zero_grad,
)
