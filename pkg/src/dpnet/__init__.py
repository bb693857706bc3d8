"""Dual-path real-time detector on a small numpy autodiff engine."""

from dpnet.tensor import ShapeError, Tensor

__version__ = "0.1.0"

__all__ = ["ShapeError", "Tensor", "__version__"]
