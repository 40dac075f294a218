"""Maximum inner product search: brute-force and graph-based indexes."""

from .index import (
    ApproxIndex,
    ExactIndex,
    RecallReport,
    build_approx,
    load_index,
    measure_recall,
    random_queries,
    save_index,
)


def query(index, h, K: int):
    """Top-K actions for latent query ``h`` from either index kind."""
    return index.query(h, K)


__all__ = [
    "ApproxIndex",
    "ExactIndex",
    "RecallReport",
    "build_approx",
    "load_index",
    "measure_recall",
    "query",
    "random_queries",
    "save_index",
]
