"""Dense-array compute core with reverse-mode gradients."""

from . import ops
from .graph import eval_graph, finite_diff_check, grad_graph, value_and_grad
from .tensor import NonFiniteError, ShapeError, Tape, Tensor

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "eval_graph",
    "finite_diff_check",
    "grad_graph",
    "ops",
    "value_and_grad",
]
