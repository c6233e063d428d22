from . import ops
from .adam import AdamState, NonFiniteGradientError, adam_step
from .gradcheck import finite_difference_check, numeric_gradient, relative_error
from .tensor import ShapeError, Tape, Tensor, as_tensor, backpropagate

__all__ = [
    "AdamState", "NonFiniteGradientError", "ShapeError", "Tape", "Tensor",
    "adam_step", "as_tensor", "backpropagate", "finite_difference_check",
    "numeric_gradient", "ops", "relative_error",
]
