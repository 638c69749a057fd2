"""Minimal numpy autodiff engine used by every model component."""

from tmloss.autodiff import functional
from tmloss.autodiff.gradcheck import grad_check, numerical_grad
from tmloss.autodiff.tensor import (
    Tape,
    Tensor,
    checked,
    get_default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Tape",
    "Tensor",
    "checked",
    "functional",
    "get_default_dtype",
    "grad_check",
    "no_grad",
    "numerical_grad",
    "precision",
    "set_default_dtype",
]
