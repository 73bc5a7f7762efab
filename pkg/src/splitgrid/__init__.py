"""Split-learning load forecasting with a frequency-domain transformer."""

__version__ = "0.1.0"
