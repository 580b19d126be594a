"""Graph transformers with GNN positional encodings and their manifold limits."""

__version__ = "0.1.0"
