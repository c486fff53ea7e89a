"""Reverse-mode autodiff on numpy arrays with swappable conv backends."""

from . import kernels, ops
from .gradcheck import grad_check, numeric_gradient
from .kernels import available_backends, get_backend, set_backend
from .tensor import Graph, Tensor, backward
from .tnsr import load_tnsr, save_tnsr

__all__ = [
    "Graph",
    "Tensor",
    "backward",
    "grad_check",
    "numeric_gradient",
    "kernels",
    "ops",
    "available_backends",
    "get_backend",
    "set_backend",
    "load_tnsr",
    "save_tnsr",
]
