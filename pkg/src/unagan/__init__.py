"""Unsupervised noise adaptation for speech enhancement via clean-to-noisy
spectrogram simulation."""

__version__ = "0.1.0"
