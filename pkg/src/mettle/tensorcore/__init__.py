"""Dense-tensor engine: tape autodiff, seeded RNG, retained-byte ledger."""

from .engine import (
    TAGS,
    ComputeGraph,
    GradientMap,
    GraphError,
    MemoryLedger,
    Node,
    NumericError,
    ShapeError,
    Tensor,
    active_graph,
    add,
    backward,
    bce_logits,
    concat,
    constant,
    cross_entropy_logits,
    default_dtype,
    elementwise,
    gelu,
    layer_norm,
    ledger_report,
    linear,
    loss,
    matmul,
    mul,
    narrow,
    nearest_upsample,
    no_grad,
    ones,
    parameter,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    set_default_dtype,
    sigmoid,
    softmax_rows,
    sub,
    tensor,
    transpose,
    zeros,
)
from .gradcheck import finite_diff_check
from .rng import Rng

__all__ = [
    "TAGS",
    "ComputeGraph",
    "GradientMap",
    "GraphError",
    "MemoryLedger",
    "Node",
    "NumericError",
    "Rng",
    "ShapeError",
    "Tensor",
    "active_graph",
    "add",
    "backward",
    "bce_logits",
    "concat",
    "constant",
    "cross_entropy_logits",
    "default_dtype",
    "elementwise",
    "finite_diff_check",
    "gelu",
    "layer_norm",
    "ledger_report",
    "linear",
    "loss",
    "matmul",
    "mul",
    "narrow",
    "nearest_upsample",
    "no_grad",
    "ones",
    "parameter",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "set_default_dtype",
    "sigmoid",
    "softmax_rows",
    "sub",
    "tensor",
    "transpose",
    "zeros",
]
