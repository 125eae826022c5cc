"""Complementary-item recommendation with spherical Gaussian item embeddings."""

__version__ = "0.1.0"
