from .gradcheck import GradCheckReport, finite_difference_check, relative_error
from .rng import Rng
from .serialize import TensorFormatError, dump_array, load_array
from .tensor import (
    DiffTensor,
    DimensionError,
    add,
    affine,
    as_tensor,
    concat,
    cross_entropy,
    div,
    dropout,
    embedding_lookup,
    exp,
    gelu,
    layer_norm,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    softmax,
    square,
    sub,
    take_pairs,
    transpose,
    weighted_scatter_add,
)

__all__ = [
    "DiffTensor",
    "DimensionError",
    "GradCheckReport",
    "Rng",
    "TensorFormatError",
    "add",
    "affine",
    "as_tensor",
    "concat",
    "cross_entropy",
    "div",
    "dropout",
    "dump_array",
    "embedding_lookup",
    "exp",
    "finite_difference_check",
    "gelu",
    "layer_norm",
    "load_array",
    "log",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "relative_error",
    "relu",
    "reshape",
    "softmax",
    "square",
    "sub",
    "take_pairs",
    "transpose",
    "weighted_scatter_add",
]
