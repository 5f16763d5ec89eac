from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .nn import MLP, Linear
from .optim import Adam, ParamGroup
from .tensor import (
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    abs_,
    add,
    as_tensor,
    broadcast_to,
    clip,
    concatenate,
    cos,
    div,
    exp,
    getitem,
    linear_op,
    log,
    make_op,
    matmul,
    maximum,
    mean,
    mul,
    neg,
    no_grad,
    power,
    reshape,
    set_nonfinite_policy,
    sigmoid,
    sin,
    sqrt,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
    where,
)
