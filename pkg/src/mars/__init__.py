"""Multi-channel autoregressive spectrogram synthesis toolkit."""

__version__ = "0.1.0"
