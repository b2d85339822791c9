"""Point-cloud embeddings served from a tabulated MLP by trilinear lookup."""

__version__ = "0.1.0"
