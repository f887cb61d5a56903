from .gradcheck import GradCheckReport, finite_difference_check
from .memory import MemoryMeter, OutOfMemory, budget, meter, peak_tracking
from .ops import (
    ShapeError,
    activation,
    add,
    add_bias,
    as_tensor,
    broadcast_to,
    concat,
    depthwise_conv1d,
    exp,
    flip,
    gelu,
    layer_norm,
    linear,
    log,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    sigmoid,
    silu,
    slice_along,
    softmax,
    softplus,
    sub,
    take,
    transpose,
)
from .ops import sum as sum_all
from .tensor import NonFiniteError, Tape, Tensor, current_tape, grad, record, set_debug, tensor

__all__ = [
    "GradCheckReport",
    "MemoryMeter",
    "NonFiniteError",
    "OutOfMemory",
    "ShapeError",
    "Tape",
    "Tensor",
    "activation",
    "add",
    "add_bias",
    "as_tensor",
    "broadcast_to",
    "budget",
    "concat",
    "current_tape",
    "depthwise_conv1d",
    "exp",
    "finite_difference_check",
    "flip",
    "gelu",
    "grad",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "meter",
    "mul",
    "peak_tracking",
    "record",
    "reshape",
    "scale",
    "set_debug",
    "sigmoid",
    "silu",
    "slice_along",
    "softmax",
    "softplus",
    "sub",
    "sum_all",
    "take",
    "tensor",
    "transpose",
]
