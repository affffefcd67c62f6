"""Minimal differentiation engine: float64 tensors with reverse and forward mode."""

from .io import FormatError, dumps_tensor, load_tensor, loads_tensor, save_tensor
from .optim import Adam
from .tensor import (
    ComputationRecord,
    ContractViolation,
    NumericalError,
    Tensor,
    add,
    as_tensor,
    backward,
    batch_norm,
    concat,
    conv2d,
    cos,
    div,
    exp,
    getitem,
    grad,
    identity,
    jacobian,
    jvp,
    log,
    matmul,
    mul,
    neg,
    no_grad,
    norm,
    ones,
    power,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    softplus,
    sqrt,
    stack,
    sub,
    take,
    tanh,
    transpose,
    zeros,
)

__all__ = [name for name in dir() if not name.startswith("_")]
