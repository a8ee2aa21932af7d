"""Temporal co-attention network (TCoN) on a minimal numpy autograd."""

__version__ = "0.1.0"
