"""Multimodal age regression with disentangled shared/distinct autoencoder codes."""

__version__ = "0.1.0"
