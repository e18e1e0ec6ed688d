"""Float64 reverse-mode engine: tensors, kernels, Adam, schedules, gradcheck."""

from .gradcheck import finite_difference_gradients, max_relative_error
from .seeds import derive_seed
from .optim import (
    AdamState,
    CosineAnnealing,
    StepDecay,
    TrainHistory,
    adam_step,
    init_adam,
    lr_at,
)
from .tensor import (
    Parameter,
    Tensor,
    add,
    clip,
    concat,
    gather_rows,
    layer_norm,
    log,
    masked_fill,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    shift,
    sigmoid,
    slice_axis,
    softmax,
    tanh,
    transpose,
    tsum,
    uniform_init,
)

__all__ = [
    "Tensor",
    "Parameter",
    "add",
    "mul",
    "scale",
    "shift",
    "matmul",
    "concat",
    "sigmoid",
    "tanh",
    "relu",
    "softmax",
    "masked_fill",
    "layer_norm",
    "mean",
    "tsum",
    "log",
    "clip",
    "transpose",
    "reshape",
    "gather_rows",
    "slice_axis",
    "uniform_init",
    "AdamState",
    "init_adam",
    "adam_step",
    "CosineAnnealing",
    "StepDecay",
    "TrainHistory",
    "lr_at",
    "finite_difference_gradients",
    "max_relative_error",
    "derive_seed",
]
