from .engine import (
    EngineError,
    Graph,
    LabelError,
    ShapeError,
    Tensor,
    add,
    block_self_attention,
    concat_cols,
    concat_rows,
    conv_unfold,
    cross_entropy,
    gather_rows,
    layer_norm,
    matmul,
    mul,
    param,
    record,
    recording,
    reshape,
    scale,
    sigmoid,
    silu,
    slice_cols,
    slice_rows,
    softmax_rows,
    sub,
    sum_all,
    tensor,
    transpose,
)
from .gradcheck import DeterminismError, finite_diff_check
from .optim import GradAccumSgd, ProtocolError
from .rng import Rng

__all__ = [
    "EngineError", "Graph", "LabelError", "ShapeError", "Tensor",
    "add", "block_self_attention", "concat_cols", "concat_rows", "conv_unfold",
    "cross_entropy", "gather_rows", "layer_norm", "matmul", "mul", "param",
    "record", "recording", "reshape", "scale", "sigmoid", "silu",
    "slice_cols", "slice_rows", "softmax_rows", "sub", "sum_all", "tensor",
    "transpose", "DeterminismError", "finite_diff_check",
    "GradAccumSgd", "ProtocolError", "Rng",
]
