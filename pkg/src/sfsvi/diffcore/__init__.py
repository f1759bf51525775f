"""Numerical substrate: reverse-mode autodiff and MLP forward/Jacobian machinery."""

from . import autodiff
from .autodiff import PRIMITIVES, Var, backward, constant, grad, leaf, stop_gradient, value_and_grad
from .mlp import (
    FunctionMoments,
    MlpArchitecture,
    Params,
    apply,
    diag_function_variance,
    forward,
    full_function_covariance,
    function_moments,
    jacobian_rows,
)

__all__ = [
    "PRIMITIVES",
    "FunctionMoments",
    "MlpArchitecture",
    "Params",
    "Var",
    "apply",
    "autodiff",
    "backward",
    "constant",
    "diag_function_variance",
    "forward",
    "full_function_covariance",
    "function_moments",
    "grad",
    "jacobian_rows",
    "leaf",
    "stop_gradient",
    "value_and_grad",
]
