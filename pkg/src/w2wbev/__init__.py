"""Window-to-window BEV representation learning for cross-view retrieval."""

from w2wbev.tensor import Tensor, grad_check, no_grad

__all__ = ["Tensor", "grad_check", "no_grad"]
__version__ = "0.1.0"
