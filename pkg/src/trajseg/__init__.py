"""Desk-scale video reasoning segmentation.

A language-conditioned video segmenter built entirely on numpy: a small
decoder-only reasoner emits a trajectory token for the referred object,
per-frame cross-attention adapts that token to each key frame, and a
unified prompt-encoder/mask-decoder segments key frames from tokens and
the remaining frames from a bounded memory bank.
"""

__version__ = "0.1.0"

from .autodiff import Linear, Module, Tensor, no_grad
from .errors import TrajSegError

__all__ = ["Tensor", "Module", "Linear", "no_grad", "TrajSegError", "__version__"]
