"""Minimal dense-tensor library with reverse-mode autodiff."""

from .autodiff import (
    DimensionError,
    Graph,
    Tensor,
    absolute,
    add,
    add_bias,
    affine_channels,
    as_tensor,
    backward,
    concat,
    div,
    exp,
    leaky_relu,
    linear,
    log,
    make_node,
    matmul,
    mul,
    narrow,
    neg,
    no_grad,
    pow_scalar,
    reshape,
    sigmoid,
    sqrt,
    sub,
    tanh,
    tmean,
    topo_order,
    transpose,
    tsum,
    zero_grads,
)
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    INSTANCE_EPS,
    avg_pool2x2,
    bilinear_sample,
    broadcast_scalar,
    conv1d,
    conv2d,
    feature_affine,
    identity_grid,
    instance_norm,
    instance_stats,
    logabsdet,
    lstm_cell,
    rows_matmul,
    rows_solve,
    upsample_bilinear,
    upsample_nearest2x,
)
from .optim import AdamState, adam_step, adam_state_arrays, load_adam_state_arrays
from .serialize import (
    CheckpointError,
    assign_arrays,
    checkpoint_digest,
    load_array,
    load_checkpoint,
    read_manifest,
    save_array,
    save_checkpoint,
)

__all__ = [name for name in dir() if not name.startswith("_")]
