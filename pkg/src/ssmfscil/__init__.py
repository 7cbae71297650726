"""Selective state-space projector and few-shot class-incremental engine."""

from .tensor import Tensor, GradTape, gradient_check, no_grad

__version__ = "0.1.0"

__all__ = ["Tensor", "GradTape", "gradient_check", "no_grad", "__version__"]
