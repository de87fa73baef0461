"""Anchor-based neural Gaussian splatting with adaptive frequency encoding."""

__version__ = "0.1.0"

from .autodiff import Tensor, Tape, backward, finite_difference_check

__all__ = ["Tensor", "Tape", "backward", "finite_difference_check", "__version__"]
