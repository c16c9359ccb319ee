"""Float64 tensors with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCheckResult, check_all, grad_check
from .optim import AdamState, adam_step
from .tensor import GradientMap, Tape, Tensor, as_tensor, backward, no_tape

__all__ = [
    "ops", "Tensor", "Tape", "GradientMap", "as_tensor", "backward", "no_tape",
    "AdamState", "adam_step", "grad_check", "check_all", "GradCheckResult",
]
