"""Segmental cross-modal alignment toolkit.

Trains a word-discovering speech encoder against frozen image/text embedding
spaces, with contrastive losses, vocabulary regularization, straight-through
vector quantization, an audio-only twin-branch mode, and an evaluation
harness for retrieval recall, semantic similarity, and boundary quality.
"""

from .autodiff import Tensor, backward, grad_check, no_grad, stop_gradient

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "grad_check", "no_grad", "stop_gradient", "__version__"]
