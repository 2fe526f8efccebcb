"""Three-layer agent memory with per-step activation, refinement and skill consolidation."""

from __future__ import annotations

from .graph import ANCHOR, DEFAULT_DIMENSION, Edge, EdgeKind, Layer, MemoryGraph, MemoryNode

__version__ = "0.1.0"

__all__ = [
    "ANCHOR",
    "DEFAULT_DIMENSION",
    "Edge",
    "EdgeKind",
    "Layer",
    "MemoryGraph",
    "MemoryNode",
    "__version__",
]
