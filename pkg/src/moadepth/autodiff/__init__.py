from . import functional
from .functional import PRIMITIVES, primitive_forward
from .gradcheck import GradReport, finite_difference_grad, grad_check, relative_error
from .rng import derive_seed, seeded_rng_fill
from .tensor import Function, Tensor, as_tensor, no_grad, parameter

__all__ = [
    "Function", "GradReport", "PRIMITIVES", "Tensor", "as_tensor", "derive_seed",
    "finite_difference_grad", "functional", "grad_check", "no_grad", "parameter",
    "primitive_forward", "relative_error", "seeded_rng_fill",
]
