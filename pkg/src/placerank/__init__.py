"""Global retrieval plus learned correlation-based reranking for place recognition."""

__version__ = "0.1.0"
