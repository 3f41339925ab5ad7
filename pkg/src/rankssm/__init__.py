"""Selective state space sequence models and a document reranking pipeline.

Float64 numpy throughout, with a small tape-based autograd, numba kernels
(pure-numpy fallback via ``RANKSSM_BACKEND=numpy``), BM25 first-stage
retrieval, InfoNCE training, and MRR/NDCG evaluation.
"""

from .errors import ConfigError, DataError, InputFormatError, ModeError, NumericError, ParseError, ShapeError
from .models import BackboneConfig, Reranker
from .tensor import Tensor, backward, no_grad, parameter

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "ConfigError",
    "DataError",
    "InputFormatError",
    "ModeError",
    "NumericError",
    "ParseError",
    "Reranker",
    "ShapeError",
    "Tensor",
    "backward",
    "no_grad",
    "parameter",
]
