"""Decoder-only transformer set-prediction detector for large sparse
point clouds, with anchor-based queries and inter-layer query refinement.
"""

__version__ = "0.1.0"
