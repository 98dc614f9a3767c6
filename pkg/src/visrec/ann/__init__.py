from .index import COMPACT_THRESHOLD, AnnParams, HnswIndex, Neighbor
from .kernels import BACKEND, available_backends

__all__ = ["AnnParams", "HnswIndex", "Neighbor", "COMPACT_THRESHOLD", "BACKEND", "available_backends"]
