"""Mixture-of-experts visual saliency prediction, trainable on a desk.

A shared convolutional trunk feeds per-category expert heads whose maps
are modulated by trainable center-bias grids and blended by a
temperature-softened gating classifier. Everything runs on a
self-contained float64 autodiff engine so gradients stay verifiable.
"""

from .autodiff import Tensor, grad_check, zero_grad
from .errors import ConfigurationError, FormatError, UsageError

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "grad_check",
    "zero_grad",
    "ConfigurationError",
    "FormatError",
    "UsageError",
    "__version__",
]
