"""Offline optimisation of slate policies over large discrete action spaces."""

from .core import (
    EmbeddingMatrix,
    LinearParams,
    PolicyParams,
    RngStream,
    TwoLayerParams,
    context_embedding,
    decide,
    mean_embedding,
    mean_embeddings,
    top_k,
)

__version__ = "0.1.0"

__all__ = [
    "EmbeddingMatrix",
    "LinearParams",
    "PolicyParams",
    "RngStream",
    "TwoLayerParams",
    "context_embedding",
    "decide",
    "mean_embedding",
    "mean_embeddings",
    "top_k",
]
