"""End-to-end temporal video grounding with a cross-modal transformer.

Raw clip + token query in, ranked temporal segments out. Built on a small
numpy tensor engine with reverse-mode autodiff; every fusion mechanism and
sizing axis is a config knob.
"""

from .tensor import Tensor, backward, finite_difference_grad, no_grad

__all__ = ["Tensor", "backward", "finite_difference_grad", "no_grad"]
__version__ = "0.1.0"
