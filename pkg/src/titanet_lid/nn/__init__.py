"""Minimal reverse-mode autodiff over numpy arrays."""
from titanet_lid.nn import functional
from titanet_lid.nn.gradcheck import grad_check
from titanet_lid.nn.kernels import BACKEND as KERNEL_BACKEND
from titanet_lid.nn.tensor import SequenceMask, Tensor, as_tensor, grad_enabled, no_grad

__all__ = [
    "KERNEL_BACKEND",
    "SequenceMask",
    "Tensor",
    "as_tensor",
    "functional",
    "grad_check",
    "grad_enabled",
    "no_grad",
]
