from .tensor import (
    Tensor,
    Node,
    record,
    ComputationGraph,
    backward,
    no_grad,
    precision,
    default_dtype,
    is_grad_enabled,
)
from .ops import *
from .gradcheck import gradcheck, numerical_grad
