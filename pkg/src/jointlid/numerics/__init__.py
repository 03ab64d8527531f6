from .gradcheck import GradCheckReport, ParamCheck, finite_difference_check, relative_error
from .tensor import (
    ShapeError,
    Tensor,
    add,
    affine,
    as_tensor,
    backward,
    concat,
    conv1d,
    depthwise_conv1d,
    exp,
    expand,
    gather_rows,
    get_dtype,
    get_precision,
    layer_norm,
    log,
    log_softmax,
    masked_select,
    matmul,
    mean,
    mul,
    precision,
    relu,
    reshape,
    sigmoid,
    slice,
    softmax,
    sub,
    sum,
    swish,
    topological_order,
    transpose,
)

__all__ = [
    "GradCheckReport",
    "ParamCheck",
    "ShapeError",
    "Tensor",
    "add",
    "affine",
    "as_tensor",
    "backward",
    "concat",
    "conv1d",
    "depthwise_conv1d",
    "exp",
    "expand",
    "finite_difference_check",
    "gather_rows",
    "get_dtype",
    "get_precision",
    "layer_norm",
    "log",
    "log_softmax",
    "masked_select",
    "matmul",
    "mean",
    "mul",
    "precision",
    "relative_error",
    "relu",
    "reshape",
    "sigmoid",
    "slice",
    "softmax",
    "sub",
    "sum",
    "swish",
    "topological_order",
    "transpose",
]
