"""Text-guided style transfer by non-autoregressive token translation."""

__version__ = "0.1.0"
