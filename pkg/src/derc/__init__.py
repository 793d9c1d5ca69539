"""Emotion distribution estimation in conversation: Dirichlet prior networks on a causal Transformer."""

__version__ = "0.1.0"
