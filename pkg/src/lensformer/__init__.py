"""Self-attention encoder toolkit for finding strong gravitational lenses."""

from .tensor import Tensor, backward, no_grad, precision

__all__ = ["Tensor", "backward", "no_grad", "precision"]

__version__ = "0.1.0"
