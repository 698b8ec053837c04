"""Multimodal masked-autoencoder pretraining with cross-attention fusion for one-shot activity recognition."""

__version__ = "0.1.0"
