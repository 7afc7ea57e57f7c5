from .kernels import BACKEND
from .tape import (
    DimensionError,
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    add,
    assemble_rows,
    concat_cols,
    constant,
    conv1d,
    dropout,
    gather_rows,
    log_clamped,
    matmul,
    maxpool2,
    mean_valid_rows,
    mul,
    param,
    pelu,
    scale,
    slice_cols,
    softmax,
    sub,
    sum_all,
    transpose,
    zero_rows,
)

__all__ = [
    "BACKEND",
    "DimensionError",
    "NonFiniteError",
    "Tape",
    "TapeError",
    "Tensor",
    "add",
    "assemble_rows",
    "concat_cols",
    "constant",
    "conv1d",
    "dropout",
    "gather_rows",
    "log_clamped",
    "matmul",
    "maxpool2",
    "mean_valid_rows",
    "mul",
    "param",
    "pelu",
    "scale",
    "slice_cols",
    "softmax",
    "sub",
    "sum_all",
    "transpose",
    "zero_rows",
]
