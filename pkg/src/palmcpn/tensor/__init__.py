"""Minimal tensor library with reverse-mode autodiff and the layers the model needs."""

from . import functional
from .checkpoint import load_arrays, save_arrays
from .core import Parameter, Tensor, as_tensor, is_grad_enabled, no_grad
from .gradcheck import GradcheckResult, gradcheck
from .optim import SGD, OptimizerState, cosine_lr, sgd_step, zero_grad

__all__ = [
    "Tensor", "Parameter", "as_tensor", "no_grad", "is_grad_enabled", "functional",
    "gradcheck", "GradcheckResult", "SGD", "OptimizerState", "cosine_lr", "sgd_step",
    "zero_grad", "save_arrays", "load_arrays",
]
