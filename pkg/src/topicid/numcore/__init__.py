"""Framework-free differentiable computation: tensors, autodiff, layers, optimizers."""

from .gradcheck import check_gradients, numerical_grad, relative_error
from .layers import (
    GRU,
    LSTM,
    Conv1d,
    Conv2d,
    GRUCell,
    Linear,
    glorot_uniform,
    masked_mean,
    orthogonal,
    statistics_pooling,
)
from .optim import SGD, Adam, MissingGradientError, OptimizerConfig, make_optimizer
from .params import (
    CheckpointError,
    ParameterSet,
    derive_seed,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from .recurrent import gru_cell, gru_scan, lstm_cell, lstm_scan
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    concat,
    default_dtype,
    div,
    exp,
    get_default_dtype,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    pad,
    relu,
    reshape,
    sigmoid,
    softmax,
    sqrt,
    stack,
    sub,
    tabs,
    tanh,
    transpose,
    tsum,
)

__all__ = [name for name in dir() if not name.startswith("_")]
