from . import kernels, ops
from .gradcheck import check_parameters, grad_check, numeric_gradient, relative_error
from .ops import *  # noqa: F401,F403
from .ops import OP_NAMES
from .tensor import Tensor, as_tensor, grad_of, is_grad_enabled, no_grad, stop_gradient

__all__ = [
    "Tensor",
    "as_tensor",
    "grad_of",
    "no_grad",
    "is_grad_enabled",
    "stop_gradient",
    "grad_check",
    "check_parameters",
    "numeric_gradient",
    "relative_error",
    "kernels",
    "ops",
    *OP_NAMES,
]
